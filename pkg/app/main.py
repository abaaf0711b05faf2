# -------------------------------------------------------------
# branchwave command-line entrypoint
# -------------------------------------------------------------
from typing import Annotated, Optional

import typer
from loguru import logger

from app.api.commands import router as commands_router
from app.config import settings
from app.logging_setup import configure_logging

app = typer.Typer(
    name="branchwave",
    help="Branching Monte Carlo solver for wave equations with ReLU network distillation.",
    no_args_is_help=True,
    add_completion=False,
)

# Register the command router at the top level (no sub-group)
app.registered_commands.extend(commands_router.registered_commands)


@app.callback()
def main(
    log_level: Annotated[Optional[str], typer.Option("--log-level", help="loguru level (default from settings)")] = None,
):
    configure_logging(log_level)
    logger.debug(f"Environment: {settings.ENV}")


def run() -> None:
    app()


if __name__ == "__main__":
    run()
