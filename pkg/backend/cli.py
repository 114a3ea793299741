"""
StyleBridge command line.

    python cli.py train --config run.cfg --out runs/a
    python cli.py eval --checkpoint runs/a/model.ckpt --out runs/a
    python cli.py eval --generated gen.ckpt --target ref.ckpt --out runs/b

Exit status: 0 on success, 1 on a StyleBridge error, 2 on usage errors.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from config import load_config, setup_logging
from ml.errors import StyleBridgeError, UsageError
from services.experiment_service import COMMANDS, DEFAULT_COUNT, RunOptions, run

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Interpretable style transfer on toy mel-spectrograms")
    parser.add_argument("command", help=f"One of: {', '.join(COMMANDS)}")
    parser.add_argument("--config", type=Path, default=None, help="key=value config file (defaults if omitted)")
    parser.add_argument("--out", type=Path, default=Path("runs/latest"), help="Output directory")
    parser.add_argument("--checkpoint", type=Path, default=None, help="Model checkpoint to load (or resume)")
    parser.add_argument("--dataset", type=Path, default=None, help="Dataset container instead of regenerating")
    parser.add_argument("--generated", type=Path, default=None, help="eval: generated mel container")
    parser.add_argument("--target", type=Path, default=None, help="eval: target mel container")
    parser.add_argument("--steps", type=int, default=None, help="Override the configured step count")
    parser.add_argument("--count", type=int, default=DEFAULT_COUNT, help="sample/transfer: number of outputs")
    parser.add_argument("--log-level", default=None, help="Overrides LOG_LEVEL")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)

    try:
        config = load_config(args.config)
        options = RunOptions(
            out_dir=args.out,
            checkpoint=args.checkpoint,
            dataset=args.dataset,
            generated=args.generated,
            target=args.target,
            steps=args.steps,
            count=args.count,
        )
        run(args.command, config, options)
    except UsageError as e:
        logger.error(f"{e}")
        return 2
    except StyleBridgeError as e:
        logger.error(f"'{args.command}' failed: {e}", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
