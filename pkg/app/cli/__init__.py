"""ctpt command line: argparse parser, stage handlers and run()."""
