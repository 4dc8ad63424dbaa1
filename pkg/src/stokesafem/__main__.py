"""Allow ``python -m stokesafem`` as an alias for the ``stokesafem`` script."""

from stokesafem.cli import main

if __name__ == "__main__":
    raise SystemExit(main())
