"""File formats, the streaming runner, the synthetic-scene generator,
metric computation and the command-line interface."""
