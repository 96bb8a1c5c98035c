import logging
import sys

logging.basicConfig(
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    level=logging.INFO,
    stream=sys.stderr,
)

logger = logging.getLogger("moe_plan")


def setup_logging(verbose: bool = False) -> None:
    """Switch every logger to DEBUG when --verbose is given."""
    logging.getLogger().setLevel(logging.DEBUG if verbose else logging.INFO)
