import logging
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Union

from loguru import logger
from loguru._defaults import LOGURU_FORMAT


class InterceptHandler(logging.Handler):
    """
    Logging handler that redirects standard logging records to Loguru.

    Third-party libraries (Pillow, numpy warnings routed through logging) keep
    using the standard module; this bridge makes their records land in the same
    sinks as ours, with the original caller location preserved.
    """

    def emit(self, record: logging.LogRecord) -> None:
        try:
            level = logger.level(record.levelname).name
        except ValueError:
            level = record.levelno

        frame, depth = logging.currentframe(), 2
        while frame.f_code.co_filename == logging.__file__:
            frame = frame.f_back  # type: ignore
            depth += 1

        logger.opt(depth=depth, exception=record.exc_info).log(
            level, record.getMessage()
        )


def format_record(record: Dict[str, Any]) -> str:
    """
    Format a Loguru record, appending the bound payload when present.

    Training incidents bind their offending values (losses, gradient norms,
    parameter names) as ``payload`` so they travel with the message.
    """
    format_string = LOGURU_FORMAT
    if record["extra"].get("payload") is not None:
        format_string += "\nPayload: {extra[payload]}"

    format_string += "\n"
    return format_string


def setup_logging(
    *,
    log_path: Optional[Path] = None,
    level: Union[str, int] = logging.INFO,
) -> None:
    """
    Initializes and configures process-wide logging.

    Args:
        log_path (Optional[Path]): Run directory receiving ``run.log``.
                                   If None, logs only go to stdout.
        level: Minimum level for every sink.
    """
    logging.root.handlers = [InterceptHandler()]
    logging.root.setLevel(level)

    for name in logging.root.manager.loggerDict.keys():
        logging.getLogger(name).handlers = []
        logging.getLogger(name).propagate = True

    logger.configure(
        handlers=[
            {
                "sink": sys.stdout,
                "level": level,
                "format": format_record,
            },
        ],
    )

    if log_path:
        logger.add(
            str(log_path / "run.log"),
            level=level,
            format=format_record,
        )

    return None
