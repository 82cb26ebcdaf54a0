"""flowact: flow-guided robot manipulation planning.

A 3D optical-flow sequence describes how an object should move; this
package turns that into robot actions: rigid registration recovers the
goal transform, a rendering + verification loop retries bad flow
predictions, grasp candidates are filtered by goal-transform reachability,
and per-timestep SE(3) pose optimization tracks the flow keypoints. A
kinematic desk simulator closes the loop for evaluation, and an extraction
pipeline produces flow from tracked video.
"""

from .extraction import BBox, ExtractionConfig, TrackSet, extract_episode
from .flowdata import Flow3D, FlowSequence, inject_noise, lift_to_3d, read_flow, write_flow
from .geometry import (
    CameraIntrinsics,
    PointSet,
    Pose,
    Rotation,
    compose,
    estimate_rigid_transform,
    farthest_point_sample,
    invert,
    project,
    unproject,
)
from .kinematics import JointChain, desk_arm, forward_kinematics, is_reachable, jacobian, solve_ik
from .oracle import (
    CorruptingGenerator,
    GeneratorRequest,
    MotionScript,
    NoisyGenerator,
    ReplayGenerator,
    ScriptedGenerator,
)
from .planner import (
    GraspCandidate,
    PlanConfig,
    Trajectory,
    flow_cost,
    goal_transform_from_flow,
    plan_trajectory,
    select_grasp,
    solve_pose_at_t,
)
from .sim import Scene, TaskSpec, check_success, evaluate, execute, make_scene, make_task, synthesize_episode
from .verify import (
    GeometricVerifier,
    PlanningFailed,
    Verdict,
    closed_loop_plan,
    external_verify,
    geometric_verify,
    render_goal_state,
)

__version__ = "0.1.0"
