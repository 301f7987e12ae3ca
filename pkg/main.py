import logging

import typer

from commands import estimate, fit, simulate

app = typer.Typer(
    name="rails",
    help="Calibration weighting of non-probability samples: propensity base weights, "
    "greedy selection of raking margins and LIFO pruning.",
    no_args_is_help=True,
    add_completion=False,
)

LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"


@app.callback()
def configure(
    verbose: int = typer.Option(
        0, "--verbose", "-v", count=True, help="Repeat for more detail (INFO, DEBUG)"
    ),
):
    """Set up logging once for every command."""
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbose, logging.DEBUG)
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


# Register commands
app.command("fit")(fit.fit_command)
app.command("simulate")(simulate.simulate_command)
app.command("estimate")(estimate.estimate_command)


if __name__ == "__main__":
    app()
