"""Turn a static CNN into an early-exit multi-stage model and search the rewrite.

The pieces, bottom up:

* :mod:`stagewise.tensor`: numpy tensors with reverse-mode autodiff
* :mod:`stagewise.graph`: layer descriptions, resolution groups, MAC counts
* :mod:`stagewise.transform`: the channel split/concat rewrite
* :mod:`stagewise.trainer`: joint multi-stage training and trace tables
* :mod:`stagewise.runtime`: threshold early exit, sweeps and selection
* :mod:`stagewise.search`: the recurrent controller trained with PPO
* :mod:`stagewise.cli`: the run-directory pipeline
"""

from .graph import count_flops, load_model
from .runtime import ThresholdPolicy, compute_reward, select_thresholds, simulate_policy, sweep_thresholds
from .trainer import TrainConfig, build_trace_table, train
from .transform import TransformSetting, apply_transform, enumerate_split_options, space_size

__version__ = "0.1.0"
