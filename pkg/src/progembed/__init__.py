"""Program embeddings for gridworld DSL code and grader-feedback propagation."""

__version__ = "0.1.0"
