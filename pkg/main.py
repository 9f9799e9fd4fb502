#!/usr/bin/env python3
"""
Dynamic-shifting point-cloud clustering toolkit - command-line entry point
"""
import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

from config.settings import ALGORITHMS, Settings
from errors import DSClusterError
from run_manager import RunManager

COMMANDS = ('gen', 'cluster', 'train', 'eval', 'analyze')
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='dscluster',
        description='Generate synthetic scenes, cluster things points, train dynamic-shifting heads and score panoptic predictions',
    )
    parser.add_argument('command', choices=COMMANDS)
    parser.add_argument('--config', help='INI file or JSON run report to take settings from')
    parser.add_argument('--seed', type=int, help='Seed for generation, sampling and initialization')
    parser.add_argument('--algo', choices=ALGORITHMS, help='Clustering algorithm for cluster')
    parser.add_argument('--model', help='Model file to read (cluster, analyze) or write (train)')
    parser.add_argument('--out', help='Output directory')
    parser.add_argument('--jobs', type=int, help='Number of worker threads')
    parser.add_argument('--data', help='Dataset directory')
    parser.add_argument('--gt', help='Ground-truth dataset directory for eval')
    parser.add_argument('--pred', help='Prediction directory for eval')
    parser.add_argument('--log-level', help='DEBUG, INFO, WARNING or ERROR')
    return parser


def setup_logging(level_name: str, out: Optional[str]):
    """Log to stdout and, when an output directory is known, to <out>/run.log"""
    level = getattr(logging, level_name.upper(), None)
    if not isinstance(level, int):
        level = logging.INFO
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    log_problem = None
    if out:
        try:
            Path(out).mkdir(parents=True, exist_ok=True)
            handlers.append(logging.FileHandler(Path(out) / 'run.log'))
        except OSError as e:
            log_problem = f"Cannot write {Path(out) / 'run.log'}: {e.strerror or e}; logging to console only"
    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers, force=True)
    if log_problem:
        logging.getLogger(__name__).warning(log_problem)


def report_error(error: Exception) -> int:
    """Print one machine-readable error line on stderr and return the exit code"""
    if isinstance(error, DSClusterError):
        category, code = error.category, error.exit_code
    else:
        category, code = 'error', 1
    logging.getLogger(__name__).error(f"{category}: {error}")
    print(json.dumps({'error': category, 'message': str(error)}), file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point; returns the process exit code"""
    load_dotenv()
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level or os.getenv('DSCLUSTER_LOG_LEVEL', 'INFO'), args.out)

    overrides = {
        'run': {'SEED': args.seed, 'JOBS': args.jobs or os.getenv('DSCLUSTER_JOBS'), 'MODEL': args.model,
                'OUT': args.out, 'DATA': args.data, 'GT': args.gt, 'PRED': args.pred},
        'clustering': {'ALGORITHM': args.algo},
    }
    try:
        settings = Settings.resolve(args.config, overrides)
        RunManager(settings).run(args.command)
    except Exception as e:
        return report_error(e)
    return 0


if __name__ == '__main__':
    sys.exit(main())
