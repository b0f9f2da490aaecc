from .exb_toy_4x4 import toy_4x4
from .exb_toy_8x8 import toy_8x8
from .exb_toy_16x16 import toy_16x16
from .shared_config import DTYPES, MAX_GRID

EXB_CONFIGS = {
    'toy-4x4': toy_4x4,
    'toy-8x8': toy_8x8,
    'toy-16x16': toy_16x16,
}

GRID_CONFIGS = {
    '4*4': (4, 4),
    '8*8': (8, 8),
    '16*16': (16, 16),
}

from .run_config import (  # noqa: E402
    ConfigError,
    dump_run_config,
    format_run_config,
    load_run_config,
    make_run_config,
    parse_run_config,
    validate_run_config,
)
