import logging
import sys

from app.cli.runner import run
from app.config import get_settings


logging.basicConfig(
    level=getattr(logging, get_settings().log_level, logging.INFO),
    format="ts=%(asctime)s level=%(levelname)s logger=%(name)s msg=%(message)s",
)


if __name__ == "__main__":
    sys.exit(run(sys.argv[1:]))
