"""
Bandwidth, bit-widths and error feedback
========================================

A slow link pushes the schedule towards heavy compression, which here means
fewer quantization bits per element. Whatever the quantizer drops is kept
in a residual and added back on the next round.
"""

import numpy as np

from acesync.compression import (CompressionSchedule, ErrorFeedbackState, accumulate_residual,
                                 apply_error_feedback, dequantize_block, quantize_block,
                                 ratio_to_bits, schedule_ratio)

sched = CompressionSchedule()
for mbps in (5, 20, 50, 100, 200):
    c = schedule_ratio(mbps, sched)
    print(f"{mbps:>4} Mbps -> c = {c:.3f} -> {ratio_to_bits(c, sched):>2} bits")

# quantize one block at a few widths
g = np.array([0.3, -0.4, 0.05, 0.0, -0.12])
for bits in (2, 4, 8):
    qb = quantize_block(g, bits)
    print(f"b={bits}: levels {qb.levels.tolist()}, reconstruction {np.round(dequantize_block(qb), 4).tolist()}")

# repeated 2-bit sends of the same gradient: with feedback the running
# average of what was sent drifts towards the true value
rng = np.random.default_rng(0)
g = rng.standard_normal(16) * 0.1
for gamma in (0.0, 1.0):
    ef = ErrorFeedbackState.zeros(g.size, gamma)
    total = np.zeros_like(g)
    for t in range(50):
        corrected = apply_error_feedback(g, ef)
        sent = dequantize_block(quantize_block(corrected, 2))
        ef = accumulate_residual(ef, corrected, sent)
        total += sent
    err = np.linalg.norm(total / 50 - g) / np.linalg.norm(g)
    print(f"gamma={gamma}: relative error of the average sent gradient {err:.4f}")
