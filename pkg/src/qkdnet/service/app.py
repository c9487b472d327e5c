"""Network-level HTTP service around a loaded simulation.

Mounts every node's key-delivery app under /kmm/{kmm_id} and adds
network endpoints: topology dump, run report, and virtual-clock
advancement so a client can drive the simulation over HTTP.
"""

from __future__ import annotations

from fastapi import FastAPI
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .kmm_api import make_kmm_app


class AdvanceRequest(BaseModel):
    seconds: float = Field(gt=0)


def make_network_app(sim) -> FastAPI:
    """sim is a started Simulation; requests observe and drive it."""
    app = FastAPI(title=f"qkd network {sim.config.name}", docs_url="/docs")

    for kmm_id in sorted(sim.kmms):
        app.mount(f"/kmm/{kmm_id}", make_kmm_app(sim.kmms[kmm_id], lambda: sim.clock.now))

    @app.get("/healthz")
    def healthz():
        return {"ok": True, "scenario": sim.config.name, "virtual_time": sim.clock.now}

    @app.get("/topology")
    def topology():
        return sim.controller.topology_snapshot(sim.clock.now)

    @app.get("/report")
    def report():
        return sim.build_report()

    @app.post("/advance")
    def advance(body: AdvanceRequest):
        target = sim.clock.now + body.seconds
        if target > sim.config.duration:
            return JSONResponse(
                status_code=400,
                content={"detail": f"cannot advance past duration {sim.config.duration}"},
            )
        sim.advance_to(target)
        return {"virtual_time": sim.clock.now}

    return app
