"""Allow running the CLI as ``python -m flowforge``."""

from .cli import entrypoint

if __name__ == "__main__":
    entrypoint()
