import sys

from modality_forge.cli import main

sys.exit(main())
