"""Command-line shell: config, checkpoints, subcommands."""
