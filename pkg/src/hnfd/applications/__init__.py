from .advection import (
    AdvectionState,
    AdvectionTimeline,
    GaussianPulse,
    RefitConfig,
    advect_step,
    grid_advect_baseline,
    oracle_step_errors,
    run_advection,
    taylor_bound,
)
from .collision import CollisionTrial, collision_trials, reflect, run_collision_trials
from .render import (
    Camera,
    normal_angle_map,
    read_ppm,
    render_normals,
    shade,
    sphere_trace,
    sphere_trace_batch,
    trace_camera,
    write_ppm,
)

__all__ = [
    "AdvectionState", "AdvectionTimeline", "GaussianPulse", "RefitConfig", "advect_step",
    "grid_advect_baseline", "oracle_step_errors", "run_advection", "taylor_bound",
    "CollisionTrial", "collision_trials", "reflect", "run_collision_trials",
    "Camera", "normal_angle_map", "read_ppm", "render_normals", "shade", "sphere_trace",
    "sphere_trace_batch", "trace_camera", "write_ppm",
]
