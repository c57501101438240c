from setuptools import setup


setup(
    name="metacog-rl",
    description="Metacognitive hyperparameter adaptation of off-policy reinforcement learning controllers.",
    version="0.1.0",
)
