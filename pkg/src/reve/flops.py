"""Training-time estimate from token count and model shape."""

from __future__ import annotations

# inputs used for the Base model pretraining estimate
BASE_RUN = dict(
    D_tokens=60_000 * 3600 * 1.1 * 68 * 17,  # hours * s/h * overlap * channels * epochs
    N=72e6,
    L=23,
    H=8,
    Q=64,
    T_tokens=68 * 11,
    P_throughput=312e12,
    mfu=0.5,
)


def flops_estimate(D_tokens: float, N: float, L: int, H: int, Q: int, T_tokens: float, P_throughput: float, mfu: float) -> dict:
    """tau = D (6N + 12 L H Q T) / (P * mfu), in seconds and accelerator-hours.

    6N counts forward+backward dense FLOPs per token; 12 L H Q T the
    attention score/value products for a T-token sequence.
    """
    if P_throughput <= 0 or mfu <= 0:
        raise ValueError("throughput and utilization must be positive")
    for name, v in dict(D_tokens=D_tokens, N=N, L=L, H=H, Q=Q, T_tokens=T_tokens).items():
        if v < 0:
            raise ValueError(f"{name} must be non-negative")
    per_token = 6 * N + 12 * L * H * Q * T_tokens
    total = D_tokens * per_token
    seconds = total / (P_throughput * mfu)
    return {"flops": total, "flops_per_token": per_token, "seconds": seconds, "gpu_hours": seconds / 3600}
