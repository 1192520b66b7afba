# -*- coding: utf-8 -*-
"""
Command-line entry point of the CFDG lab.

    python cfdg_lab.py <gen-data|train-offline|finetune|report|init-config> --config FILE [--mode MODE] [--seed N]

Exit codes: 0 success, 2 invalid input or configuration, 3 I/O error,
4 numeric failure.
"""

import argparse
import logging
import os
import sys
from logging.handlers import RotatingFileHandler
from typing import List, Optional

from cfdglib import get_cfdglib_version
from cfdglib.lab_def import FinetuneMode, LabException, LabIOError
from experiment_controller import ExperimentController
from settings_manager import SettingsManager

COMMANDS = ('gen-data', 'train-offline', 'finetune', 'report', 'init-config')
LOG_FORMAT = '%(asctime)s [%(levelname)s] %(message)s'
LOG_DATEFMT = '%Y-%m-%d %H:%M:%S'


def setup_logging(log_dir: Optional[str], verbose: bool = False) -> logging.Logger:
    """
    Configure the application logger: console at INFO (DEBUG when verbose)
    and, when log_dir is given, a rotating log file cfdg_lab.log in it.
    """
    logger = logging.getLogger('CFDGLab')
    logger.setLevel(logging.DEBUG)

    # Remove existing handlers to avoid duplicates
    for handler in list(logger.handlers):
        handler.close()
        logger.removeHandler(handler)

    formatter = logging.Formatter(LOG_FORMAT, datefmt=LOG_DATEFMT)
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.DEBUG if verbose else logging.INFO)
    console.setFormatter(formatter)
    logger.addHandler(console)

    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        file_handler = RotatingFileHandler(
            os.path.join(log_dir, 'cfdg_lab.log'),
            maxBytes=10*1024*1024,  # 10MB
            backupCount=5,
            encoding='utf-8'
        )
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)
    return logger


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='cfdg_lab.py',
                                     description='Diffusion-augmented offline-to-online RL experiments')
    parser.add_argument('command', choices=COMMANDS, help='Pipeline stage to run')
    parser.add_argument('--config', required=True, help='Settings file (key = value)')
    parser.add_argument('--mode', help='Fine-tuning mode (overrides the config)',
                        choices=[m.name.lower() for m in FinetuneMode])
    parser.add_argument('--seed', type=int, help='Run a single seed instead of all configured seeds')
    parser.add_argument('--force', action='store_true', help='init-config: overwrite an existing file')
    parser.add_argument('-v', '--verbose', action='store_true', help='Debug output on the console')
    parser.add_argument('--version', action='version', version=f'%(prog)s {get_cfdglib_version()}')
    return parser


def run(args: argparse.Namespace) -> None:
    if args.command == 'init-config':
        setup_logging(None, args.verbose)
        if os.path.exists(args.config) and not args.force:
            raise LabIOError(f"{args.config} already exists (use --force to overwrite)")
        path = SettingsManager().save(args.config)
        logging.getLogger('CFDGLab').info(f"Default settings written to {path}")
        return

    config = SettingsManager(args.config).experiment_config()
    logger = setup_logging(config.experiment_dir, args.verbose)
    logger.info("=" * 60)
    logger.info(f"{args.command} | experiment {config.experiment} | config {args.config}")
    controller = ExperimentController(config)

    if args.command == 'gen-data':
        controller.cmd_gen_data(args.seed)
    elif args.command == 'train-offline':
        controller.cmd_train_offline(args.seed)
    elif args.command == 'finetune':
        mode = FinetuneMode.from_name(args.mode) if args.mode else None
        controller.cmd_finetune(mode, args.seed)
    else:
        for path in controller.cmd_report():
            logger.info(f"Report written to {path}")


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point. Returns the process exit code."""
    args = build_parser().parse_args(argv)
    try:
        run(args)
    except LabException as e:
        logger = logging.getLogger('CFDGLab')
        if not logger.handlers:
            setup_logging(None, args.verbose)
        logger.error(str(e))
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
