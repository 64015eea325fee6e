"""Independent reference computations the tests compare against.

Nothing here imports the package under test.
"""

from fractions import Fraction

import mpmath

mpmath.mp.dps = 50


def entropy_bits_hp(probs) -> float:
    """Shannon entropy in bits evaluated at 50 significant digits."""
    total = mpmath.mpf(0)
    for p in probs:
        p = mpmath.mpf(str(p))
        if p > 0:
            total -= p * mpmath.log(p, 2)
    return float(total)


def ideal_delay_exact(num_bytes: int, bandwidth_bps: int) -> Fraction:
    return Fraction(num_bytes * 8, bandwidth_bps)


def brute_force_stddev(values) -> float:
    """Sample standard deviation via exact rational arithmetic, n - 1 denominator."""
    xs = [Fraction(v) for v in values]
    n = len(xs)
    mean = sum(xs) / n
    var = sum((x - mean) ** 2 for x in xs) / (n - 1)
    return float(mpmath.sqrt(mpmath.mpf(var.numerator) / var.denominator))


def brute_force_mean(values) -> float:
    xs = [Fraction(v) for v in values]
    return float(sum(xs) / len(xs))


def conv_out(side: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (side + 2 * padding - kernel) // stride + 1


# TinyLeNet at 32x32, worked by hand:
#   conv5 -> 6x28x28, pool2 -> 6x14x14, conv5 -> 16x10x10, pool2 -> 16x5x5 = 400,
#   dense 120, dense 2
TINY_LENET_SHAPES = [
    (6, 28, 28), (6, 28, 28), (6, 14, 14),
    (16, 10, 10), (16, 10, 10), (16, 5, 5),
    (120,), (120,), (120,),
    (2,), (2,),
]
TINY_LENET_FIRST_CONV_WEIGHT = (6, 3, 5, 5)
