"""HTTP interface to the pipeline: one synchronous endpoint per stage.

Every endpoint takes the full experiment config inline, runs the stage to
completion, and answers with the written artifacts. Error mapping:
configuration 422, missing/stale prerequisite artifact 424, any other
pipeline failure 500.
"""

from __future__ import annotations

from typing import Literal

from fastapi import FastAPI
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import __version__, pipeline
from .config import load_config
from .errors import ConfigError, MissingArtifactError, PipelineError


class StageRequest(BaseModel):
    config: dict = Field(default_factory=dict)


class TrainRequest(StageRequest):
    sampling: Literal["uniform", "weighted"] = "uniform"


class ArmSplitRequest(StageRequest):
    arm: Literal["baseline", "cognizant"]
    split: Literal["train", "val", "test"]


class StageResponse(BaseModel):
    status: str = "ok"
    stage: str
    artifacts: list[str]
    summary: dict


class RunAllResponse(BaseModel):
    status: str = "ok"
    stages: list[StageResponse]


app = FastAPI(title="cogseg", version=__version__)


@app.exception_handler(PipelineError)
def pipeline_error_handler(request, exc: PipelineError):
    status = {2: 422, 3: 424}.get(exc.exit_code, 500)
    return JSONResponse(
        status_code=status, content={"error": type(exc).__name__, "detail": str(exc)}
    )


def _run(stage_fn, request: StageRequest, *args) -> StageResponse:
    config = load_config(data=request.config)
    try:
        result = stage_fn(config, *args)
    except PipelineError:
        raise
    except FileNotFoundError as exc:
        raise MissingArtifactError(str(exc)) from exc
    except (ValueError, KeyError, RuntimeError) as exc:
        raise PipelineError(str(exc)) from exc
    return StageResponse(stage=result.stage, artifacts=result.artifacts, summary=result.summary)


@app.get("/health")
def health() -> dict:
    return {"status": "ok", "version": __version__}


@app.post("/synth", response_model=StageResponse)
def synth(request: StageRequest):
    return _run(pipeline.stage_synth, request)


@app.post("/split", response_model=StageResponse)
def split(request: StageRequest):
    return _run(pipeline.stage_split, request)


@app.post("/preprocess", response_model=StageResponse)
def preprocess(request: StageRequest):
    return _run(pipeline.stage_preprocess, request)


@app.post("/train", response_model=StageResponse)
def train(request: TrainRequest):
    return _run(pipeline.stage_train, request, request.sampling)


@app.post("/select-features", response_model=StageResponse)
def select_features(request: StageRequest):
    return _run(pipeline.stage_select_features, request)


@app.post("/retrain", response_model=StageResponse)
def retrain(request: StageRequest):
    return _run(pipeline.stage_retrain, request)


@app.post("/predict", response_model=StageResponse)
def predict(request: ArmSplitRequest):
    return _run(pipeline.stage_predict, request, request.arm, request.split)


@app.post("/evaluate", response_model=StageResponse)
def evaluate(request: ArmSplitRequest):
    return _run(pipeline.stage_evaluate, request, request.arm, request.split)


@app.post("/compare", response_model=StageResponse)
def compare(request: StageRequest):
    return _run(pipeline.stage_compare, request)


@app.post("/report", response_model=StageResponse)
def report(request: StageRequest):
    return _run(pipeline.stage_report, request)


@app.post("/run-all", response_model=RunAllResponse)
def run_all_stages(request: StageRequest):
    plan = pipeline.run_all_plan()
    return RunAllResponse(stages=[_run(step[0], request, *step[1:]) for step in plan])
