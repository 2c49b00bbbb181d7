"""
FastAPI Backend for the FaaS simulator
Starts paired baseline/minos experiments in the background and serves their
status and comparison results from Firestore.
"""

import asyncio
import os
import shutil
import uuid
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List

from dotenv import load_dotenv
from fastapi import BackgroundTasks, FastAPI, HTTPException
from loguru import logger
from pydantic import BaseModel, Field

# Load environment variables first, before reading the output location
load_dotenv()

import config
from experiment_config import ConfigError, ExperimentConfig, apply_overrides, validate_config
from firebase_service import FirebaseService
from main import run_seed, write_seed_outputs
from reporting import compare_pooled

app = FastAPI(title="Minos Simulation API", version="1.0.0")

firebase_service = FirebaseService()
outputs_root = Path(os.environ.get(config.ENV_STORE_DIR, config.STORE_DIR))


class ExperimentRequest(BaseModel):
    """Request model for a new experiment"""

    overrides: Dict[str, Any] = Field(
        default_factory=dict, description="Dotted config keys, e.g. {'workload.duration_ms': 600000}"
    )
    seeds: List[int] = Field(default_factory=lambda: [1], min_length=1, max_length=50)
    policy_disabled: bool = Field(False, description="Turn the policy off on both arms")


class ExperimentResponse(BaseModel):
    """Response model for experiment start"""

    experiment_id: str
    status: str
    message: str


def build_experiment(request: ExperimentRequest, output_dir: Path) -> ExperimentConfig:
    overrides: Dict[str, Any] = dict(request.overrides)
    overrides["seeds"] = request.seeds
    overrides["output_dir"] = str(output_dir)
    overrides["jobs"] = 1
    if request.policy_disabled:
        overrides["policy.enabled"] = False
    try:
        result = validate_config(apply_overrides({}, overrides))
    except ConfigError as e:
        raise HTTPException(status_code=422, detail=e.errors)
    if isinstance(result, list):
        raise HTTPException(status_code=422, detail=result)
    return result


def checked_id(experiment_id: str) -> str:
    """Experiment ids are UUIDs; anything else is unknown"""
    try:
        return str(uuid.UUID(experiment_id))
    except ValueError:
        raise HTTPException(status_code=404, detail="Experiment not found")


@app.get("/")
async def root():
    """Health check endpoint"""
    return {
        "status": "ok",
        "service": "Minos Simulation API",
        "version": "1.0.0",
        "firebase": firebase_service.available,
    }


@app.post("/api/experiments", response_model=ExperimentResponse)
async def start_experiment(request: ExperimentRequest, background_tasks: BackgroundTasks):
    """
    Start a new paired experiment.
    The simulation runs in the background and results are saved to Firebase.
    """
    experiment_id = str(uuid.uuid4())
    experiment = build_experiment(request, outputs_root / experiment_id)

    try:
        await firebase_service.save_experiment_metadata(
            experiment_id,
            {
                "experiment_id": experiment_id,
                "status": "processing",
                "created_at": datetime.now().isoformat(),
                "seeds": experiment.seeds,
                "seeds_done": 0,
                "policy_enabled": experiment.policy.enabled,
                "fingerprint": experiment.fingerprint(),
                "config": experiment.model_dump(mode="json"),
            },
        )
    except Exception as e:
        # the run still goes ahead; its outputs land on disk
        logger.warning(f"Could not save experiment metadata to Firebase: {e}")

    background_tasks.add_task(execute_experiment, experiment_id, experiment)
    return ExperimentResponse(
        experiment_id=experiment_id,
        status="processing",
        message=f"Experiment started with ID: {experiment_id}",
    )


async def execute_experiment(experiment_id: str, experiment: ExperimentConfig):
    """Background task: run every seed, write the outputs, save the comparison rows"""
    loop = asyncio.get_running_loop()
    try:
        output_dir = Path(experiment.output_dir)
        pairs, rows = [], []
        for done, seed in enumerate(experiment.seeds, start=1):
            outcome = await loop.run_in_executor(None, run_seed, experiment, seed)
            write_seed_outputs(outcome, output_dir)
            pairs.append((outcome.baseline, outcome.minos))
            rows.append(outcome.comparison.model_dump(mode="json"))
            await firebase_service.update_experiment_status(experiment_id, "processing", done)

        pooled = compare_pooled(pairs).model_dump(mode="json")
        await firebase_service.save_experiment_results(experiment_id, rows + [pooled])
        await firebase_service.update_experiment_status(experiment_id, "completed", len(experiment.seeds))
    except Exception as e:
        logger.exception(f"Experiment {experiment_id} failed")
        await firebase_service.update_experiment_status(experiment_id, "failed", 0, f"{type(e).__name__}: {e}")


@app.get("/api/experiments/{experiment_id}/status")
async def get_experiment_status(experiment_id: str):
    """Get the status of an experiment"""
    status = await firebase_service.get_experiment_status(checked_id(experiment_id))
    if not status:
        raise HTTPException(status_code=404, detail="Experiment not found")
    return {k: v for k, v in status.items() if k != "config"}


@app.get("/api/experiments/{experiment_id}/results")
async def get_experiment_results(experiment_id: str, limit: int = 100, offset: int = 0):
    """Comparison rows (one per seed, then the pooled row)"""
    experiment_id = checked_id(experiment_id)
    if not await firebase_service.get_experiment_status(experiment_id):
        raise HTTPException(status_code=404, detail="Experiment not found")
    results = await firebase_service.get_experiment_results(experiment_id, limit=limit, offset=offset)
    return {"experiment_id": experiment_id, "results": results, "count": len(results)}


@app.get("/api/experiments")
async def list_experiments(limit: int = 20):
    """List recent experiments"""
    experiments = await firebase_service.list_recent_experiments(limit=limit)
    return {"experiments": [{k: v for k, v in e.items() if k != "config"} for e in experiments]}


@app.delete("/api/experiments/{experiment_id}")
async def delete_experiment(experiment_id: str):
    """Delete an experiment, its rows and its output files"""
    experiment_id = checked_id(experiment_id)
    if not await firebase_service.delete_experiment(experiment_id):
        raise HTTPException(status_code=404, detail="Experiment not found")
    shutil.rmtree(outputs_root / experiment_id, ignore_errors=True)
    return {"message": f"Experiment {experiment_id} deleted successfully"}


if __name__ == "__main__":
    import uvicorn

    port = int(os.environ.get("PORT", 8000))
    uvicorn.run(app, host="0.0.0.0", port=port)
