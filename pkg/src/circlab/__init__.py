"""circlab: stopping-time partitions, induced Markov maps and ergodic statistics
for circle maps f(x) = x + a + L ln|Phi(x)|."""

__all__: list[str] = []
