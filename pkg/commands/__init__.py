import typer

from models import SchemaError

EXIT_INPUT_ERROR = 1
EXIT_NOT_CONVERGED = 2


def report_input_error(error: Exception):
    """Print an input error, with the level diff for schema mismatches, to stderr."""
    typer.echo(f"Error: {error}", err=True)
    if isinstance(error, SchemaError) and error.diff:
        for variable, sides in error.diff.items():
            levels = ", ".join(f"{side}={values}" for side, values in sides.items())
            typer.echo(f"  {variable}: {levels}", err=True)
