"""Higher layer: fitness monitoring, safe Bayesian optimization and the episode loop."""
