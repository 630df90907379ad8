"""FastAPI application exposing the pipeline: dataset generation, splits,
prior training, semi-supervised training, experiments, evaluation,
inference, and reports.

Endpoints execute synchronously and return when the work is done; the CLI
is a thin client over this API (in-process by default).
"""
from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..core import SplitManifest, dataset_case_ids, load_split, make_splits
from ..errors import AnatomiaError, ConfigError, DataError
from ..experiment import (
    ExperimentManifest,
    dae_config_from_raw,
    evaluate_checkpoint,
    run_experiment,
    run_inference,
    ssl_config_from_raw,
)
from ..nets import load_checkpoint
from ..prior import train_dae
from ..report import generate_report
from ..seeding import apply_determinism_from_env
from ..semisup import train_ssl
from ..synthdata import SynthConfig, gen_dataset
from . import schemas

_STATUS_BY_KIND = {"config": 422, "data": 400, "divergence": 500, "internal": 500}


def _resolve_split(
    dataset_dir: str,
    split_path: str | None,
    split: schemas.SplitSpec | None,
):
    if split_path:
        manifest = SplitManifest.load(split_path)
    elif split is not None:
        ids = dataset_case_ids(dataset_dir)
        manifest = make_splits(
            ids,
            n_labeled=split.n_labeled,
            m_unlabeled=split.m_unlabeled,
            val_frac=split.val_frac,
            test_frac=split.test_frac,
            seed=split.seed,
        )
    else:
        raise ConfigError("either split_path or an inline split is required")
    return manifest, load_split(dataset_dir, manifest)


def create_app() -> FastAPI:
    deterministic = apply_determinism_from_env()
    app = FastAPI(title="anatomia", version=__version__)

    @app.exception_handler(AnatomiaError)
    async def _anatomia_error(_: Request, exc: AnatomiaError) -> JSONResponse:
        return JSONResponse(
            status_code=_STATUS_BY_KIND.get(exc.kind, 500),
            content={"error": {"kind": exc.kind, "message": str(exc)}},
        )

    @app.get("/health", response_model=schemas.HealthResponse)
    def health() -> schemas.HealthResponse:
        return schemas.HealthResponse(
            status="ok", version=__version__, deterministic=deterministic
        )

    @app.post("/datasets/generate", response_model=schemas.GenerateDatasetResponse)
    def generate_dataset(req: schemas.GenerateDatasetRequest) -> schemas.GenerateDatasetResponse:
        raw = dict(req.config)
        if "image_size" in raw:
            raw["image_size"] = tuple(raw["image_size"])
        try:
            cfg = SynthConfig(**raw)
        except TypeError as exc:
            raise ConfigError(f"bad dataset config: {exc}") from exc
        case_ids = gen_dataset(cfg, req.out_dir)
        return schemas.GenerateDatasetResponse(
            dataset_dir=req.out_dir, num_cases=len(case_ids), case_ids=case_ids
        )

    @app.post("/splits", response_model=schemas.MakeSplitResponse)
    def make_split(req: schemas.MakeSplitRequest) -> schemas.MakeSplitResponse:
        ids = dataset_case_ids(req.dataset_dir)
        manifest = make_splits(
            ids,
            n_labeled=req.split.n_labeled,
            m_unlabeled=req.split.m_unlabeled,
            val_frac=req.split.val_frac,
            test_frac=req.split.test_frac,
            seed=req.split.seed,
        )
        if req.out_path:
            manifest.save(req.out_path)
        return schemas.MakeSplitResponse(manifest=manifest.to_dict(), out_path=req.out_path)

    @app.post("/prior/train", response_model=schemas.TrainPriorResponse)
    def prior_train(req: schemas.TrainPriorRequest) -> schemas.TrainPriorResponse:
        _, split = _resolve_split(req.dataset_dir, req.split_path, req.split)
        raw = dict(req.config)
        arch_raw = raw.pop("arch", {})
        cfg = dae_config_from_raw(arch_raw, raw, req.seed)
        result = train_dae(split, cfg, req.out_ckpt, log_path=req.log_path)
        return schemas.TrainPriorResponse(
            checkpoint=result["checkpoint"],
            iterations=result["iterations"],
            final_loss=result["final_loss"],
        )

    @app.post("/ssl/train", response_model=schemas.TrainSslResponse)
    def ssl_train(req: schemas.TrainSslRequest) -> schemas.TrainSslResponse:
        _, split = _resolve_split(req.dataset_dir, req.split_path, req.split)
        raw = dict(req.config)
        arch_raw = raw.pop("arch", {})
        cfg = ssl_config_from_raw(arch_raw, raw, req.strategy, req.dae_ckpt, req.seed)
        result = train_ssl(split, cfg, req.out_dir)
        return schemas.TrainSslResponse(
            checkpoint=result["checkpoint"],
            log=result["log"],
            iterations=result["iterations"],
            selection=result["selection"],
            best_val_dsc=result["best_val_dsc"],
        )

    @app.post("/experiments/run", response_model=schemas.ExperimentResponse)
    def experiments_run(req: schemas.ExperimentRequest) -> schemas.ExperimentResponse:
        manifest = ExperimentManifest.from_dict(req.manifest)
        result = run_experiment(manifest, resume=req.resume)
        return schemas.ExperimentResponse(
            out_dir=result["out_dir"], cells=result["cells"], summary=result["summary"]
        )

    @app.post("/evaluations/run", response_model=schemas.EvaluateResponse)
    def evaluations_run(req: schemas.EvaluateRequest) -> schemas.EvaluateResponse:
        manifest = SplitManifest.load(req.split_path)
        split = load_split(req.dataset_dir, manifest)
        subset = {
            "test": split.test,
            "val": split.val,
            "labeled": split.labeled,
        }.get(req.subset)
        if subset is None:
            raise ConfigError(f"unknown subset {req.subset!r}")
        if not subset:
            raise DataError(f"subset {req.subset!r} is empty")
        patch_size = req.patch_size
        if patch_size is None:
            patch_size = load_checkpoint(req.checkpoint)["patch_size"]
        out_json = req.out_json or str(Path(req.checkpoint).parent / "metrics.json")
        metrics = evaluate_checkpoint(
            req.checkpoint, subset, patch_size, out_json=out_json
        )
        return schemas.EvaluateResponse(metrics=metrics, out_json=out_json)

    @app.post("/inference/run", response_model=schemas.InferenceResponse)
    def inference_run(req: schemas.InferenceRequest) -> schemas.InferenceResponse:
        case_ids = req.case_ids or dataset_case_ids(req.dataset_dir)
        volume_dirs = [str(Path(req.dataset_dir) / cid) for cid in case_ids]
        result = run_inference(
            req.checkpoint,
            volume_dirs,
            req.out_dir,
            dae_ckpt=req.dae_ckpt,
            patch_size=req.patch_size,
        )
        return schemas.InferenceResponse(
            cases=result["cases"], out_dir=req.out_dir, uncertainty=result["dae"]
        )

    @app.post("/reports/generate", response_model=schemas.ReportResponse)
    def reports_generate(req: schemas.ReportRequest) -> schemas.ReportResponse:
        outputs = generate_report(req.results_dir, req.out_dir, infer_dir=req.infer_dir)
        return schemas.ReportResponse(
            tables=outputs["tables"], figures=outputs["figures"]
        )

    return app
