"""Engine services: kernels, corruption, reverse rates, sampling, training and metrics."""
