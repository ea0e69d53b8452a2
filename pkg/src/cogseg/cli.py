"""Command line client for the experiment service.

By default each subcommand spins up the service in-process and calls it
over the test transport, so no server has to be running; ``--server``
points the same commands at a remote instance instead. Unknown ``--a.b.c
value`` flags become dotted-path config overrides.

Exit codes: 0 success, 2 configuration error, 3 missing prerequisite
artifact, 4 runtime failure.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import httpx

from .config import apply_overrides, load_config
from .errors import ConfigError

EXTRA = {"ignore_unknown_options": True, "allow_extra_args": True}


def parse_overrides(args: list[str]) -> dict[str, str]:
    """Turn leftover ``--a.b.c value`` or ``--a.b.c=value`` flags into a dict."""
    overrides: dict[str, str] = {}
    i = 0
    while i < len(args):
        arg = args[i]
        if not arg.startswith("--"):
            raise ConfigError(f"unexpected argument {arg!r}; overrides look like --train.lr0 0.001")
        body = arg[2:]
        if "=" in body:
            key, value = body.split("=", 1)
            i += 1
        else:
            key = body
            if i + 1 >= len(args):
                raise ConfigError(f"override {arg!r} is missing a value")
            value = args[i + 1]
            i += 2
        overrides[key] = value
    return overrides


def make_client(server: str | None) -> httpx.Client:
    if server:
        return httpx.Client(base_url=server, timeout=None)
    from fastapi.testclient import TestClient

    from .service import app

    return TestClient(app, raise_server_exceptions=False)


def _finish(response: httpx.Response) -> None:
    try:
        body = response.json()
    except ValueError:
        body = {"detail": response.text}
    if response.status_code < 400:
        click.echo(json.dumps(body, indent=2))
        return
    click.echo(json.dumps(body, indent=2), err=True)
    code = {422: 2, 424: 3}.get(response.status_code, 4)
    sys.exit(code)


def _invoke(ctx, endpoint: str, config_path: str | None, server: str | None, **params) -> None:
    try:
        overrides = parse_overrides(list(ctx.args))
        data = {}
        if config_path:
            try:
                data = json.loads(Path(config_path).read_text())
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {config_path}") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file is not valid JSON: {exc}") from None
        data = apply_overrides(data, overrides)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    with make_client(server) as client:
        response = client.post(endpoint, json={"config": data, **params})
    _finish(response)


def common_options(fn):
    fn = click.option(
        "--config", "config_path", default=None, help="Experiment config JSON file."
    )(fn)
    fn = click.option(
        "--server", default=None, help="Service URL; default runs the service in-process."
    )(fn)
    return fn


@click.group()
def main():
    """Two-arm kidney tumor segmentation experiment."""


@main.command("init-config", context_settings=EXTRA)
@click.option("--out", default="config.json", show_default=True, help="Where to write the config.")
@click.pass_context
def init_config(ctx, out):
    """Write a fully populated default config, with overrides applied."""
    try:
        overrides = parse_overrides(list(ctx.args))
        config = load_config(overrides=overrides)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    config.to_json(out)
    click.echo(f"wrote {out}")


def _stage_command(name: str, endpoint: str, help_text: str):
    @main.command(name, context_settings=EXTRA, help=help_text)
    @common_options
    @click.pass_context
    def cmd(ctx, config_path, server):
        _invoke(ctx, endpoint, config_path, server)

    return cmd


_stage_command("synth", "/synth", "Generate the synthetic cohort.")
_stage_command("split", "/split", "Split the cohort into train/val/test.")
_stage_command("preprocess", "/preprocess", "Resample, normalize, and persist all cases.")
_stage_command("select-features", "/select-features", "LASSO selection and sampling weights.")
_stage_command("retrain", "/retrain", "Train the cognizant arm with the selected weights.")
_stage_command("compare", "/compare", "Paired statistics between the arms on the test split.")
_stage_command("report", "/report", "Render plots and the comparison summary.")
_stage_command("run-all", "/run-all", "Run every stage of the experiment in order.")


@main.command("train", context_settings=EXTRA)
@common_options
@click.option(
    "--sampling",
    type=click.Choice(["uniform", "weighted"]),
    default="uniform",
    show_default=True,
    help="uniform trains the baseline arm, weighted the cognizant arm.",
)
@click.pass_context
def train_cmd(ctx, config_path, server, sampling):
    """Train one arm of the experiment."""
    _invoke(ctx, "/train", config_path, server, sampling=sampling)


@main.command("predict", context_settings=EXTRA)
@common_options
@click.option("--arm", type=click.Choice(["baseline", "cognizant"]), required=True)
@click.option("--split", type=click.Choice(["train", "val", "test"]), required=True)
@click.pass_context
def predict_cmd(ctx, config_path, server, arm, split):
    """Sliding-window inference for one arm over one split."""
    _invoke(ctx, "/predict", config_path, server, arm=arm, split=split)


@main.command("evaluate", context_settings=EXTRA)
@common_options
@click.option("--arm", type=click.Choice(["baseline", "cognizant"]), required=True)
@click.option("--split", type=click.Choice(["train", "val", "test"]), required=True)
@click.pass_context
def evaluate_cmd(ctx, config_path, server, arm, split):
    """Hierarchical Dice / surface Dice scoring of saved predictions."""
    _invoke(ctx, "/evaluate", config_path, server, arm=arm, split=split)


if __name__ == "__main__":
    main()
