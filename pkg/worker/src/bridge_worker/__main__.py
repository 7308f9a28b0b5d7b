import sys

from bridge_worker import main

sys.exit(main())
