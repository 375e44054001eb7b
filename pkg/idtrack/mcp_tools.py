"""
id: mcp_tools
tag: tools

Experiment and algebra operations exposed as MCP tools.
Every tool returns a JSON-serializable dict; failures come back as
{"error": ..., "type": ...} instead of raising.
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from fastmcp import FastMCP

from . import harness
from .config import OUT_DIR, IdtrackError
from .gaussian_id import MomentGaussian, cov_to_id, quad_form_inverse

logger = logging.getLogger(__name__)

mcp = FastMCP("idtrack")


def _error(e: Exception) -> Dict:
    return {"error": str(e), "type": type(e).__name__}


def run_experiment(
    kind: str,
    config_path: Optional[str] = None,
    trials: Optional[int] = None,
    steps: Optional[int] = None,
    seed: Optional[int] = None,
    backend: str = "both",
    out_dir: Optional[str] = None,
    paper_scale: bool = False,
    case: Optional[int] = None,
    check: bool = False,
    classical_model: Optional[str] = None,
) -> Dict:
    """
    Run an experiment and write its CSV and metadata sidecar.

    Args:
        kind: equivalence, rho-sweep, mismatch, sigma-sweep or single-run
        config_path: Optional TOML config file
        trials, steps, seed: Overrides for the preset/config values
        backend: jpdaf, id-jpdaf or both
        out_dir: Output directory (IDTRACK_OUT_DIR or ./results by default)
        paper_scale: Use the published trial and step counts
        case: Mismatch case 1 or 2
        check: Apply the acceptance checks to sweeps and mismatch runs
        classical_model: white (default) or augmented, for the classical backend in colored runs

    Returns:
        dict: Summary, written paths and any acceptance failures
    """
    try:
        spec = harness.configure_spec(
            kind,
            config_path,
            paper_scale=paper_scale,
            case=case,
            trials=trials,
            steps=steps,
            seed=seed,
            backend=backend,
            classical_model=classical_model,
        )
        outcome = harness.run_experiment(spec, Path(out_dir) if out_dir else OUT_DIR, check=check)
    except (IdtrackError, ValueError) as e:
        return _error(e)
    return {
        "kind": outcome.kind.value,
        "csv": str(outcome.csv_path),
        "metadata": str(outcome.meta_path),
        "config_hash": harness.config_hash(spec),
        "summary": harness.to_jsonable(outcome.summary),
        "failures": outcome.failures,
        "passed": not outcome.failures,
    }


def convert_covariance(cov: List[List[float]], mean: Optional[List[float]] = None) -> Dict:
    """
    Convert a covariance matrix to influence-diagram form.

    Returns:
        dict: mean, arcs (strictly upper triangular B) and cond_vars (V)
    """
    try:
        cov = np.asarray(cov, dtype=float)
        mean = np.zeros(cov.shape[0]) if mean is None else np.asarray(mean, dtype=float)
        id_ = cov_to_id(MomentGaussian(mean, cov))
    except (IdtrackError, ValueError) as e:
        return _error(e)
    return {"mean": id_.mean.tolist(), "arcs": id_.arcs.tolist(), "cond_vars": id_.cond_vars.tolist()}


def mahalanobis_distance(cov: List[List[float]], residual: List[float]) -> Dict:
    """
    Gating distance r^T S^-1 r computed from the (B, V) form of S, without inverting S.

    Returns:
        dict: d2 and the conditional variances of S
    """
    try:
        s_id = cov_to_id(MomentGaussian(np.zeros(len(residual)), np.asarray(cov, dtype=float)))
        d2 = quad_form_inverse(s_id, residual)
    except (IdtrackError, ValueError) as e:
        return _error(e)
    return {"d2": d2, "cond_vars": s_id.cond_vars.tolist()}


def list_experiments() -> Dict:
    """Experiment kinds with their desk-scale defaults."""
    experiments = {}
    for kind in harness.ExperimentKind:
        spec = harness.default_spec(kind)
        experiments[kind.value.replace("_", "-")] = {
            "trials": spec.trials,
            "steps": spec.steps,
            "variant": spec.scenario.variant.value,
            "grid": list(spec.grid),
            "backends": [b.value for b in spec.backends],
            "classical_model": spec.classical_model.value,
        }
    return {"experiments": experiments, "mismatch_cases": harness.to_jsonable(
        {case: {"true": vars(t), "filter": vars(f)} for case, (t, f) in harness.MISMATCH_CASES.items()}
    )}


TOOLS = [run_experiment, convert_covariance, mahalanobis_distance, list_experiments]

for _tool in TOOLS:
    mcp.tool()(_tool)

TOOL_MAP = {tool.__name__: tool for tool in TOOLS}


if __name__ == "__main__":
    mcp.run()
