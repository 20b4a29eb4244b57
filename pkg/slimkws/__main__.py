"""Allow `python -m slimkws`."""

from .cli import main

raise SystemExit(main())
