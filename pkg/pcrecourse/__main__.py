"""Command line entry point: ``python -m pcrecourse <command> -c config.json``."""

import argparse
import logging
import sys
from pathlib import Path

from pcrecourse.experiment import ExperimentRunner, ablate
from pcrecourse.report_writer import format_text, load_report, report_tables, write_docx
from pcrecourse.utils.config import RunConfig
from pcrecourse.utils.logger import logger, setup_logging

FOLD_COMMANDS = ("train-pc", "train-clf", "train-gen", "generate")


def parse_args(argv=None):
    """Parse command line arguments."""
    parser = argparse.ArgumentParser(
        description="Plausible algorithmic recourse with probabilistic circuits."
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Log debug output")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("-c", "--config", required=True, help="Run config JSON file")
        return p

    with_config("prepare", "Split folds, discretize and write bin diagnostics")
    for name, help_text in (
        ("train-pc", "Learn p+ and p- per fold"),
        ("train-clf", "Train the classifier per fold"),
        ("train-gen", "Build the pool and train the recourse generator per fold"),
        ("generate", "Generate counterfactuals for denied test factuals"),
    ):
        p = with_config(name, help_text)
        p.add_argument("--fold", type=int, default=None, help="Only this fold (default: all)")
        if name == "train-clf":
            p.add_argument("--youden", action="store_true", default=None, help="Select tau by Youden's J")
        if name == "generate":
            p.add_argument("--local-search", choices=("on", "off"), default=None, help="Refine decoded candidates")
    with_config("evaluate", "Score all folds and write report.json and records.csv")
    with_config("ablate", "Retrain the generator for every loss-toggle row")
    run = with_config("run", "Run every stage for every fold")
    run.add_argument("--local-search", choices=("on", "off"), default=None)

    report = sub.add_parser("report", help="Render report.json or ablation.json as a table")
    report.add_argument("input", help="report.json or ablation.json")
    report.add_argument("--docx", default=None, help="Also write a Word document to this path")
    return parser.parse_args(argv)


def main(argv=None):
    """Main function executed when the module is run."""
    args = parse_args(argv)
    setup_logging(logging.DEBUG if args.verbose else logging.INFO)
    try:
        if args.command == "report":
            report = load_report(args.input)
            sys.stdout.write(format_text(report_tables(report)))
            if args.docx:
                write_docx(report, Path(args.docx))
            return 0

        config = RunConfig.load(args.config)
        runner = ExperimentRunner(config)
        local_search = None
        if getattr(args, "local_search", None) is not None:
            local_search = args.local_search == "on"

        if args.command == "prepare":
            runner.prepare()
        elif args.command in FOLD_COMMANDS:
            folds = runner.fold_ids() if args.fold is None else [args.fold]
            for k in folds:
                if args.command == "train-pc":
                    runner.train_circuits(k)
                elif args.command == "train-clf":
                    runner.train_classifier(k, youden=args.youden)
                elif args.command == "train-gen":
                    runner.train_generator(k)
                else:
                    runner.generate(k, local_search)
        elif args.command == "evaluate":
            report = runner.evaluate()
            sys.stdout.write(format_text(report_tables(report)))
        elif args.command == "ablate":
            summary = ablate(config)
            sys.stdout.write(format_text(report_tables(summary)))
        elif args.command == "run":
            report = runner.run(local_search)
            sys.stdout.write(format_text(report_tables(report)))
        return 0
    except FileNotFoundError as e:
        logger.error(f"Input file not found: {e.filename or e}")
        return 1
    except Exception as e:
        logger.error(f"Error running {args.command}: {str(e)}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
