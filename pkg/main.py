"""
rotkp - oriented two-keypoint detector core
Command-line entry point
"""
import logging
import sys

from modules.cli import build_parser, run

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(verbosity: int) -> None:
    """WARNING by default, INFO with -v, DEBUG with -vv; always on stderr"""
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr)


def main() -> int:
    args = build_parser().parse_args()
    configure_logging(args.verbose)
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
