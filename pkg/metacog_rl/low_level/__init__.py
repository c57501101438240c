"""Low-level learners: off-policy policy iteration and its Riccati oracle."""
