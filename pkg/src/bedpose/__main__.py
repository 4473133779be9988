"""Entry point for python -m bedpose."""

from bedpose.app import main

if __name__ == "__main__":
    main()
