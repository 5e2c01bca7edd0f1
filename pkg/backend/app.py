import logging
from typing import Dict, List

from fastapi import FastAPI, HTTPException, Query
from fastapi.middleware.cors import CORSMiddleware
from fastapi.middleware.trustedhost import TrustedHostMiddleware
from pydantic import BaseModel, Field

from config import config
from engagement_sim import TRAJECTORY_COLUMNS, classify_outcome
from engagement_suite import EngagementSuite, SuiteReport
from exceptions import ConfigurationError, DegenerateGeometryError, FieldFormatError, MissingDependencyError
from models import Pose, RunConfig

logger = logging.getLogger(__name__)

# Initialize FastAPI app
app = FastAPI(title="WEZ Engagement Solver", root_path="")

# Add trusted host middleware for proxy
app.add_middleware(
    TrustedHostMiddleware,
    allowed_hosts=["*"]
)

# Enable CORS with proper settings for proxy
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
    expose_headers=["*"],
)

# Read-only view over the artifact directory
suite = EngagementSuite(RunConfig(output_dir=config.OUTPUT_DIR))


class FieldSummary(BaseModel):
    """Header of one stored field"""
    name: str
    variant: str
    grid: List[int]
    r_max: float
    sigma: float
    converged: bool
    iterations: int


class SliceRowModel(BaseModel):
    r: float
    xi_t: float
    value: float
    control: float


class SimulateRequest(BaseModel):
    """Request model for a single engagement"""
    agent_pose: List[float] = Field(min_length=3, max_length=3)
    target_pose: List[float] = Field(min_length=3, max_length=3)
    agent_ctrl: str = "policy:baseline-agent"
    target_ctrl: str = "constant:0"


class SimulateResponse(BaseModel):
    outcome: str
    t_f: float
    columns: List[str]
    rows: List[List[float]]


def _http_error(e: Exception) -> HTTPException:
    if isinstance(e, (MissingDependencyError, FileNotFoundError)):
        return HTTPException(status_code=404, detail=str(e))
    if isinstance(e, (ConfigurationError, DegenerateGeometryError, FieldFormatError)):
        return HTTPException(status_code=422, detail=str(e))
    return HTTPException(status_code=500, detail=str(e))


# API Endpoints

@app.get("/api/fields", response_model=List[FieldSummary])
async def list_fields():
    """Stored fields in the artifact directory"""
    try:
        return [
            FieldSummary(
                name=name,
                variant=header.variant.value,
                grid=list(header.grid.shape),
                r_max=header.r_max,
                sigma=header.sigma,
                converged=header.converged,
                iterations=header.iterations,
            )
            for name, header in suite.list_fields().items()
        ]
    except Exception as e:
        raise _http_error(e)


@app.get("/api/fields/{name}/slice", response_model=List[SliceRowModel])
async def field_slice(name: str, xi_a: float = Query(default=3.141592653589793)):
    """Value and policy on the plane of constant xi_A nearest the requested angle"""
    path = suite.output_dir / name
    if "/" in name or "\\" in name or not path.is_file():
        raise HTTPException(status_code=404, detail=f"no stored field named {name}")
    try:
        return [SliceRowModel(r=row.r, xi_t=row.xi_t, value=row.value, control=row.control)
                for row in suite.slice(path, xi_a)]
    except Exception as e:
        raise _http_error(e)


@app.post("/api/simulate", response_model=SimulateResponse)
async def simulate_engagement(request: SimulateRequest):
    """Simulate one engagement against stored or scripted controllers"""
    try:
        trajectory = suite.simulate(Pose(*request.agent_pose), Pose(*request.target_pose),
                                    request.agent_ctrl, request.target_ctrl)
    except Exception as e:
        raise _http_error(e)

    rows = [
        [s.t, s.agent.x, s.agent.y, s.agent.theta, s.target.x, s.target.y, s.target.theta,
         s.u_a, s.u_t, s.state.r, s.state.xi_a, s.state.xi_t]
        for s in trajectory.samples
    ]
    return SimulateResponse(
        outcome=classify_outcome(trajectory).label,
        t_f=trajectory.t_f,
        columns=TRAJECTORY_COLUMNS,
        rows=rows,
    )


@app.get("/api/verify", response_model=List[SuiteReport])
async def verify():
    """Run the oracle suites"""
    return suite.verify()


@app.on_event("startup")
async def startup_event():
    """Report the stored fields on startup"""
    fields: Dict[str, object] = suite.list_fields()
    logger.info("serving %d stored fields from %s", len(fields), suite.output_dir)
