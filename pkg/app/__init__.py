import logging
import sys

__version__ = '1.0.0'

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


def configure_logging(level: str = 'INFO'):
    """Install one stream handler on the root logger (idempotent)"""
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, '_spdinv', False):
            root.removeHandler(handler)

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    handler._spdinv = True
    root.addHandler(handler)
    root.setLevel(getattr(logging, str(level).upper(), logging.INFO))
    return root
