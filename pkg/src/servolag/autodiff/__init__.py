"""Computation graphs, derivatives, and the tape compiler/executors."""

from servolag.autodiff.graph import (
    Node,
    OP_KINDS,
    add,
    backward,
    concat,
    constant,
    derive,
    evaluate,
    evaluate_many,
    finite_difference_check,
    hadamard,
    inp,
    jvp,
    matmul,
    parameter,
    reciprocal,
    relu,
    scale,
    select,
    sigmoid,
    softplus,
    square,
    sub,
    sum_all,
    transpose,
)
from servolag.autodiff.tape import TapeProgram, available_engines, default_engine

__all__ = [
    "Node", "OP_KINDS", "add", "backward", "concat", "constant", "derive",
    "evaluate", "evaluate_many", "finite_difference_check", "hadamard",
    "inp", "jvp", "matmul", "parameter", "reciprocal", "relu", "scale",
    "select", "sigmoid", "softplus", "square", "sub", "sum_all", "transpose",
    "TapeProgram", "available_engines", "default_engine",
]
