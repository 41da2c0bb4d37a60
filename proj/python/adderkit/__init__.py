"""Adder network kernels: l1-matching filters, surrogate gradients and the
operation/energy counters. Thin wrapper over the compiled module."""

from ._adderkit import (  # noqa: F401
    __version__,
    adder_backward_input,
    adder_backward_weight,
    adder_forward,
    conv_backward,
    conv_forward,
    count_layer,
    energy_mj,
    export_graph,
    gradcheck_battery,
    relu,
    sparsity,
)
