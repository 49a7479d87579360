"""Module entry point so ``python -m dgattn`` matches the installed script."""

from .cli import main

main()
