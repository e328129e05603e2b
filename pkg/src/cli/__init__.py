"""
コマンドラインインターフェース
"""

from .configuration import RunConfig, load_config_file, parse_overrides, resolve_run_config
from .plots import emit_plots, histogram_table
from .runner import COMMANDS, resolve_checkpoint, run
