"""Writes gradient64.png and its expected 48x48 model input.

The resize is an independent NumPy implementation: Keys cubic kernel
(a = -0.5), half-pixel sampling, clamped edge taps, normalized weights,
no anti-aliasing. Output is CHW float32, little-endian, standardized with
the CLIP mean/std.
"""
import numpy as np
from PIL import Image

MEAN = np.array([0.48145466, 0.4578275, 0.40821073], dtype=np.float32)
STD = np.array([0.26862954, 0.26130258, 0.27577711], dtype=np.float32)


def keys(t, a=-0.5):
    t = abs(t)
    if t <= 1:
        return (a + 2) * t**3 - (a + 3) * t**2 + 1
    if t < 2:
        return a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a
    return 0.0


def matrix(n_in, n_out):
    m = np.zeros((n_out, n_in))
    for o in range(n_out):
        x = (o + 0.5) * n_in / n_out - 0.5
        base = np.floor(x)
        taps = [(int(min(max(base + k - 1, 0), n_in - 1)), keys(x - (base + k - 1))) for k in range(4)]
        total = sum(w for _, w in taps)
        for i, w in taps:
            m[o, i] += w / total
    return m


yy, xx = np.mgrid[0:64, 0:64]
rgb = np.stack([xx * 4, yy * 4, (xx * yy * 7) % 256], axis=-1).astype(np.uint8)
Image.fromarray(rgb, "RGB").save("gradient64.png")

rows, cols = matrix(64, 48), matrix(64, 48)
out = []
for c in range(3):
    plane = rgb[..., c].astype(np.float64) / 255.0
    resized = rows @ plane @ cols.T
    out.append((resized.astype(np.float32) - MEAN[c]) / STD[c])
np.stack(out).astype("<f4").tofile("gradient64_to48.f32")
