"""Bit-exact bfloat16 attention emulation.

Thin re-export of the compiled module: bf16 bit-level helpers
(``b16_bits``, ``add_b16``, ``prefix_errors``), precision-tagged attention
(``attention``, ``attention_grads``, ``flash``), the gradient-bias
decomposition (``gradient_bias``) and the paired training-arm experiment
(``sign_probe``, ``experiment``).
"""

try:
    from ._lpfa import *  # installed layout: the module sits inside the package
    from ._lpfa import __doc__ as _core_doc
except ImportError:  # build-tree layout: the module sits next to the package
    from _lpfa import *
    from _lpfa import __doc__ as _core_doc

__all__ = [
    "b16_bits",
    "b16_value",
    "b16_ulp",
    "snap",
    "snap_array",
    "add_b16",
    "rounding_bit_table",
    "prefix_errors",
    "attention",
    "attention_grads",
    "flash",
    "gradient_bias",
    "sign_probe",
    "experiment",
]
