"""clothdiff: диффузионные модели восприятия и динамики ткани и планировщик MPPI."""

from .clothsim import ClothSimulator, SimParams, make_grid_cloth, rollout
from .config import Config, get_config
from .dynamics import DdmConfig, DdmModel, predict, rollout_autoregressive
from .geometry import ClothMesh, PointCloud, chamfer, emd, mse
from .perception import DpmConfig, DpmModel, estimate_state
from .planner import PlannerConfig, mpc_episode, plan

__version__ = "1.0.0"

__all__ = [
	"Config",
	"get_config",
	"ClothMesh",
	"PointCloud",
	"mse",
	"chamfer",
	"emd",
	"SimParams",
	"ClothSimulator",
	"make_grid_cloth",
	"rollout",
	"DpmConfig",
	"DpmModel",
	"estimate_state",
	"DdmConfig",
	"DdmModel",
	"predict",
	"rollout_autoregressive",
	"PlannerConfig",
	"plan",
	"mpc_episode",
]
