"""Desk-scale joint-attention DiT with LoRA-adapted guidance projections."""

from .block import MmaBlockParams, mma_backward, mma_forward
from .flow import (
    FlowMatchBatch,
    ToyDataset,
    TrainConfig,
    euler_sample,
    flow_match_loss,
    recursive_upscale,
    train,
)
from .lora import LoraAdapter, lora_project, lora_project_backward
from .model import ToyDiT
