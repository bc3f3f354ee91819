#!/usr/bin/env python3
"""Regenerate the canonical 68-point face template used by the synthetic
face generator (crates/core/src/template.rs).

Points follow the usual 68-point ordering: jaw 0-16, right brow 17-21,
left brow 22-26, nose bridge 27-30, nostrils 31-35, right eye 36-41,
left eye 42-47, outer lip 48-59, inner lip 60-67. "Right" is the subject's
right, which sits on the image left. Coordinates are in the unit square with
the face centred on (0.5, 0.5) and every point within 0.36 of the centre.

Usage: python3 scripts/gen_template.py > /tmp/table.rs
"""
import math

def jaw():
    # Lower half of an ellipse: right temple, chin, left temple.
    cx, cy, rx, ry = 0.5, 0.40, 0.27, 0.36
    return [(cx + rx * math.cos(math.pi * (1 - i / 16)), cy + ry * math.sin(math.pi * (1 - i / 16))) for i in range(17)]

def brow(x0, x1, y, arch, mirror):
    pts = []
    for i in range(5):
        u = i / 4.0
        x = x0 + (x1 - x0) * u
        h = arch * math.sin(math.pi * (u if not mirror else 1 - u) * 0.9 + 0.15)
        pts.append((x, y - h))
    return pts

def eye(cx, cy, rx, ry, outer_left):
    # Six points: corner, two upper, corner, two lower (clockwise on screen).
    angles = [180, 120, 60, 0, 300, 240]
    pts = [(cx + rx * math.cos(math.radians(a)), cy - ry * math.sin(math.radians(a))) for a in angles]
    return pts

def lip(cx, cy, rx, ry_top, ry_bot, n_top, n_bot):
    top = []
    for i in range(n_top):
        a = math.pi * (1 - i / (n_top - 1))
        top.append((cx + rx * math.cos(a), cy - ry_top * math.sin(a)))
    bot = []
    for i in range(1, n_bot + 1):
        a = -math.pi * (i / (n_bot + 1))
        bot.append((cx + rx * math.cos(a), cy - ry_bot * math.sin(a)))
    return top, bot

def template():
    pts = jaw()
    pts += brow(0.30, 0.46, 0.375, 0.025, False)
    pts += brow(0.54, 0.70, 0.375, 0.025, True)
    pts += [(0.5, 0.42 + 0.045 * i) for i in range(4)]
    pts += [(0.5 + 0.035 * k, 0.57 + 0.012 * (1 - abs(k) / 2.0)) for k in (-2, -1, 0, 1, 2)]
    pts += eye(0.385, 0.44, 0.048, 0.018, True)
    pts += eye(0.615, 0.44, 0.048, 0.018, False)
    top, bot = lip(0.5, 0.655, 0.085, 0.028, 0.036, 7, 5)
    pts += top + bot
    itop, ibot = lip(0.5, 0.655, 0.06, 0.01, 0.012, 5, 3)
    pts += itop + ibot
    assert len(pts) == 68, len(pts)
    for x, y in pts:
        assert math.hypot(x - 0.5, y - 0.5) <= 0.36, (x, y)
    return pts

if __name__ == "__main__":
    print("pub const TEMPLATE: [[f64; 2]; 68] = [")
    for i, (x, y) in enumerate(template()):
        print(f"    [{x:.6f}, {y:.6f}], // {i}")
    print("];")
