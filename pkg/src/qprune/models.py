"""Built-in desk-scale model specs.

``qcnn-mini`` is a six-block feedforward quaternion CNN whose real widths
grow 16 -> 256; the last three conv blocks carry most of the parameters and
are the default pruning targets.  ``qresnet-mini`` adds two residual blocks
and marks the two tail conv layers prunable.  ``cnn-mini`` is the
real-valued control with identical real widths, consuming the same
four-plane input as 4*Q ordinary channels.
"""

from __future__ import annotations

import numpy as np

from .exceptions import ConfigError
from .nn import (
    AvgPool2d,
    BatchNorm2d,
    Conv2d,
    Flatten,
    GlobalAvgPool2d,
    Linear,
    ModelGraph,
    QBatchNorm2d,
    QConv2d,
    QLinear,
    ReLU,
    ResidualBlock,
)

MODEL_NAMES = ("qcnn-mini", "qresnet-mini", "cnn-mini")


def _qblock(q_in, q_out, pool):
    layers = [QConv2d(q_in, q_out, (3, 3), padding=1), QBatchNorm2d(q_out), ReLU()]
    if pool:
        layers.append(AvgPool2d(2))
    return layers


def _rblock(c_in, c_out, pool):
    layers = [Conv2d(c_in, c_out, (3, 3), padding=1), BatchNorm2d(c_out), ReLU()]
    if pool:
        layers.append(AvgPool2d(2))
    return layers


def qcnn_mini(num_classes, input_shape=(4, 32, 16), task="single"):
    widths = (4, 8, 16, 32, 64, 64)  # quaternion channels; 16..256 real
    q_in = input_shape[0] // 4
    layers = []
    prunable = []
    for b, q_out in enumerate(widths):
        if b >= 3:
            prunable.append(len(layers))  # the qconv index of this block
        layers.extend(_qblock(q_in, q_out, pool=b < 4))
        q_in = q_out
    layers.extend([GlobalAvgPool2d(), Flatten(), Linear(4 * widths[-1], num_classes)])
    return ModelGraph(layers, input_shape, num_classes, quaternion=True,
                      task=task, name="qcnn-mini", prunable=prunable)


def qresnet_mini(num_classes, input_shape=(4, 32, 16), task="single"):
    def res(q):
        return ResidualBlock([
            QConv2d(q, q, (3, 3), padding=1), QBatchNorm2d(q), ReLU(),
            QConv2d(q, q, (3, 3), padding=1), QBatchNorm2d(q),
        ])

    q0 = input_shape[0] // 4
    layers = [
        QConv2d(q0, 8, (3, 3), padding=1), QBatchNorm2d(8), ReLU(), AvgPool2d(2),
        res(8), AvgPool2d(2),
        res(8), AvgPool2d(2),
    ]
    prunable = [len(layers)]
    layers.extend([QConv2d(8, 16, (3, 3), padding=1), QBatchNorm2d(16), ReLU()])
    prunable.append(len(layers))
    layers.extend([QConv2d(16, 32, (3, 3), padding=1), QBatchNorm2d(32), ReLU()])
    layers.extend([GlobalAvgPool2d(), Flatten(), Linear(4 * 32, num_classes)])
    return ModelGraph(layers, input_shape, num_classes, quaternion=True,
                      task=task, name="qresnet-mini", prunable=prunable)


def cnn_mini(num_classes, input_shape=(4, 32, 16), task="single"):
    widths = (16, 32, 64, 128, 256, 256)
    c_in = input_shape[0]
    layers = []
    prunable = []
    for b, c_out in enumerate(widths):
        if b >= 3:
            prunable.append(len(layers))
        layers.extend(_rblock(c_in, c_out, pool=b < 4))
        c_in = c_out
    layers.extend([GlobalAvgPool2d(), Flatten(), Linear(widths[-1], num_classes)])
    return ModelGraph(layers, input_shape, num_classes, quaternion=False,
                      task=task, name="cnn-mini", prunable=prunable)


_BUILDERS = {"qcnn-mini": qcnn_mini, "qresnet-mini": qresnet_mini,
             "cnn-mini": cnn_mini}


def build_model(name, num_classes, input_shape=(4, 32, 16), seed=0,
                task="single"):
    """Instantiate and initialize a named model spec."""
    try:
        builder = _BUILDERS[name]
    except KeyError:
        raise ConfigError(
            f"unknown model {name!r}; choose from {', '.join(MODEL_NAMES)}"
        ) from None
    model = builder(num_classes, tuple(input_shape), task)
    model.init_params(np.random.default_rng(seed))
    return model


def reinitialize(model, seed):
    """Copy of a model with freshly drawn weights (architecture unchanged)."""
    fresh = model.clone()
    fresh.init_params(np.random.default_rng(seed))
    fresh.forward_count = 0
    return fresh
