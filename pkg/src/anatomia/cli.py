"""Command-line client for the experiment service.

Config files are resolved locally (so parse diagnostics point at the real
file and line), then sent to the HTTP API. Without ``--server`` the API runs
in-process over an ASGI transport, which keeps single-machine runs
deterministic; with ``--server`` the same requests go to a remote instance
sharing the filesystem paths.

Exit codes: 0 success, 2 config error, 3 data error, 4 training divergence.
"""
from __future__ import annotations

import asyncio
import json
import sys
from typing import Any

import click
import httpx

from .configio import resolve_config
from .errors import AnatomiaError

EXIT_CODES = {"config": 2, "data": 3, "divergence": 4, "internal": 1}


class ServiceError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class ServiceClient:
    """Blocking JSON-over-HTTP client; in-process unless a server is given."""

    def __init__(self, server: str | None = None):
        self.server = server

    def post(self, path: str, payload: dict[str, Any]) -> dict[str, Any]:
        return asyncio.run(self._request("POST", path, payload))

    def get(self, path: str) -> dict[str, Any]:
        return asyncio.run(self._request("GET", path, None))

    async def _request(self, method: str, path: str, payload: dict | None) -> dict:
        if self.server:
            transport = None
            base_url = self.server
        else:
            from .service import create_app

            transport = httpx.ASGITransport(app=create_app())
            base_url = "http://anatomia.internal"
        async with httpx.AsyncClient(
            transport=transport, base_url=base_url, timeout=None
        ) as client:
            response = await client.request(method, path, json=payload)
        if response.status_code >= 400:
            try:
                body = response.json()
            except json.JSONDecodeError:
                raise ServiceError("internal", response.text)
            if "error" in body:
                raise ServiceError(body["error"]["kind"], body["error"]["message"])
            # FastAPI request-validation failure
            raise ServiceError("config", json.dumps(body.get("detail", body)))
        return response.json()


def _run(client: ServiceClient, path: str, payload: dict) -> dict:
    try:
        return client.post(path, payload)
    except AnatomiaError as exc:
        click.echo(f"error ({exc.kind}): {exc}", err=True)
        sys.exit(EXIT_CODES.get(exc.kind, 1))
    except ServiceError as exc:
        click.echo(f"error ({exc.kind}): {exc}", err=True)
        sys.exit(EXIT_CODES.get(exc.kind, 1))
    except httpx.HTTPError as exc:
        click.echo(f"error (connection): {exc}", err=True)
        sys.exit(1)


def _load_config(config_path: str | None, sets: tuple[str, ...]) -> dict:
    try:
        return resolve_config(path=config_path, sets=sets)
    except AnatomiaError as exc:
        click.echo(f"error ({exc.kind}): {exc}", err=True)
        sys.exit(EXIT_CODES.get(exc.kind, 1))


def _split_payload(cfg: dict) -> dict:
    out: dict[str, Any] = {}
    if cfg.get("split_path"):
        out["split_path"] = cfg["split_path"]
    elif cfg.get("split"):
        out["split"] = cfg["split"]
    return out


@click.group()
@click.option("--server", envvar="ANATOMIA_SERVER", default=None, help="Remote service URL; default runs in-process.")
@click.pass_context
def main(ctx: click.Context, server: str | None) -> None:
    """Shape-prior uncertainty for semi-supervised segmentation."""
    ctx.obj = ServiceClient(server)


@main.command("gen-data")
@click.option("--config", "config_path", type=click.Path(), default=None, help="Dataset config file.")
@click.option("--set", "sets", multiple=True, help="Override: key=value (dotted keys).")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.pass_obj
def gen_data(client: ServiceClient, config_path: str | None, sets: tuple[str, ...], out_dir: str) -> None:
    """Generate a synthetic dataset of organ-like 2D cases."""
    cfg = _load_config(config_path, sets)
    result = _run(client, "/datasets/generate", {"out_dir": out_dir, "config": cfg})
    click.echo(f"wrote {result['num_cases']} cases to {result['dataset_dir']}")


@main.command("train-dae")
@click.option("--config", "config_path", type=click.Path(), required=True)
@click.option("--set", "sets", multiple=True)
@click.option("--dataset", "dataset_dir", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_ckpt", required=True, type=click.Path())
@click.pass_obj
def train_dae_cmd(client, config_path, sets, dataset_dir, seed, out_ckpt) -> None:
    """Train the mask shape prior on the labeled split."""
    cfg = _load_config(config_path, sets)
    payload = {
        "dataset_dir": dataset_dir or cfg.get("dataset"),
        "config": {"arch": cfg.get("arch", {}), **cfg.get("dae", {})},
        "out_ckpt": out_ckpt,
        "log_path": str(out_ckpt) + ".csv",
        "seed": seed if seed is not None else int(cfg.get("seed", 0)),
        **_split_payload(cfg),
    }
    result = _run(client, "/prior/train", payload)
    click.echo(
        f"prior trained for {result['iterations']} iterations "
        f"(final loss {result['final_loss']:.4f}) -> {result['checkpoint']}"
    )


@main.command("train-ssl")
@click.option("--config", "config_path", type=click.Path(), required=True)
@click.option("--set", "sets", multiple=True)
@click.option("--strategy", required=True)
@click.option("--seed", type=int, required=True)
@click.option("--dataset", "dataset_dir", type=click.Path(), default=None)
@click.option("--dae", "dae_ckpt", type=click.Path(), default=None)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.pass_obj
def train_ssl_cmd(client, config_path, sets, strategy, seed, dataset_dir, dae_ckpt, out_dir) -> None:
    """Train the mean-teacher model under one uncertainty strategy."""
    cfg = _load_config(config_path, sets)
    payload = {
        "dataset_dir": dataset_dir or cfg.get("dataset"),
        "strategy": strategy,
        "config": {"arch": cfg.get("arch", {}), **cfg.get("ssl", {})},
        "dae_ckpt": dae_ckpt or cfg.get("dae_ckpt"),
        "out_dir": out_dir,
        "seed": seed,
        **_split_payload(cfg),
    }
    result = _run(client, "/ssl/train", payload)
    click.echo(
        f"trained {strategy} for {result['iterations']} iterations "
        f"({result['selection']}) -> {result['checkpoint']}"
    )


@main.command("experiment")
@click.option("--manifest", "manifest_path", type=click.Path(), required=True)
@click.option("--set", "sets", multiple=True)
@click.option("--resume", is_flag=True, default=False, help="Skip cells with existing checkpoints.")
@click.pass_obj
def experiment_cmd(client, manifest_path, sets, resume) -> None:
    """Run the full (strategy x seed) grid and emit the comparison table."""
    manifest = _load_config(manifest_path, sets)
    result = _run(client, "/experiments/run", {"manifest": manifest, "resume": resume})
    failed = [c for c in result["cells"] if c["status"] != "ok"]
    click.echo(f"experiment finished: {len(result['cells']) - len(failed)} ok, {len(failed)} failed")
    for row in result["summary"]:
        if row.get("dsc_mean") is not None:
            click.echo(
                f"  {row['variant']:<16} DSC {row['dsc_mean'] * 100:6.2f} ± {row['dsc_std'] * 100:4.2f}"
            )
        else:
            click.echo(f"  {row['variant']:<16} (no completed runs)")
    click.echo(f"results under {result['out_dir']}")
    if failed:
        sys.exit(1)


@main.command("eval")
@click.option("--ckpt", "checkpoint", type=click.Path(), required=True)
@click.option("--dataset", "dataset_dir", type=click.Path(), required=True)
@click.option("--split-file", "split_path", type=click.Path(), required=True)
@click.option("--subset", default="test", type=click.Choice(["test", "val", "labeled"]))
@click.option("--out", "out_json", type=click.Path(), default=None)
@click.pass_obj
def eval_cmd(client, checkpoint, dataset_dir, split_path, subset, out_json) -> None:
    """Evaluate a checkpoint on a split subset."""
    payload = {
        "checkpoint": checkpoint,
        "dataset_dir": dataset_dir,
        "split_path": split_path,
        "subset": subset,
        "out_json": out_json,
    }
    result = _run(client, "/evaluations/run", payload)
    agg = result["metrics"]["aggregate"]
    hd = f"{agg['mean_hd95']:.2f}" if agg.get("mean_hd95") is not None else "undefined"
    click.echo(f"DSC {agg['mean_dsc'] * 100:.2f}  HD95 {hd}  -> {result['out_json']}")


@main.command("infer")
@click.option("--ckpt", "checkpoint", type=click.Path(), required=True)
@click.option("--dataset", "dataset_dir", type=click.Path(), required=True)
@click.option("--cases", default=None, help="Comma-separated case ids; default all.")
@click.option("--dae", "dae_ckpt", type=click.Path(), default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.pass_obj
def infer_cmd(client, checkpoint, dataset_dir, cases, dae_ckpt, out_dir) -> None:
    """Sliding-window predictions, plus uncertainty maps when a prior is given."""
    payload = {
        "checkpoint": checkpoint,
        "dataset_dir": dataset_dir,
        "case_ids": cases.split(",") if cases else None,
        "dae_ckpt": dae_ckpt,
        "out_dir": out_dir,
    }
    result = _run(client, "/inference/run", payload)
    flavor = "with uncertainty" if result["uncertainty"] else "predictions only"
    click.echo(f"wrote {len(result['cases'])} cases ({flavor}) to {result['out_dir']}")


@main.command("report")
@click.option("--results", "results_dir", type=click.Path(), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--infer", "infer_dir", type=click.Path(), default=None)
@click.pass_obj
def report_cmd(client, results_dir, out_dir, infer_dir) -> None:
    """Emit comparison tables, sweep plots, and overlays from a results tree."""
    payload = {"results_dir": results_dir, "out_dir": out_dir, "infer_dir": infer_dir}
    result = _run(client, "/reports/generate", payload)
    click.echo(
        f"report: {len(result['tables'])} table files, {len(result['figures'])} figures"
    )


@main.command("serve")
@click.option("--host", default="127.0.0.1")
@click.option("--port", default=8000, type=int)
def serve_cmd(host: str, port: int) -> None:
    """Run the HTTP service."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":
    main()
