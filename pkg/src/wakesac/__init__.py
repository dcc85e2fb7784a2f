"""Soft Actor-Critic wind-farm yaw control, pretrained from steady-state expert demonstrations."""
from .env import EnvConfig, EpisodeSpec, WindFarmEnv, sample_episode
from .sac import SacAgent, SacConfig, train_online
from .wake import FarmLayout, InflowCondition, TurbineSpec, WakeModel, farm_power
from .yaw_opt import SerialRefineSettings, expert_yaw_targets, serial_refine

__version__ = "0.1.0"
