"""Regenerate the bundled pi digit table with mpmath.

The runtime computes digits with a streaming spigot; this table is the
independent cross-check. Writes 10,000 fractional digits to the package
data file and to the test fixture copy, and sanity-checks the first 50
against the universally known value before writing anything.
"""

import os

from mpmath import mp

KNOWN_FIRST_50 = "14159265358979323846264338327950288419716939937510"
DIGITS = 10_000

mp.dps = DIGITS + 20
text = mp.nstr(mp.pi, DIGITS + 10, strip_zeros=False)
assert text.startswith("3."), text
fractional = text[2:2 + DIGITS]
assert len(fractional) == DIGITS, len(fractional)
assert fractional[:50] == KNOWN_FIRST_50, fractional[:50]

root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
targets = [
    os.path.join(root, "src", "deskgrid", "data", "pi_digits_10000.txt"),
    os.path.join(root, "tests", "fixtures", "pi_digits_10000.txt"),
]
for target in targets:
    os.makedirs(os.path.dirname(target), exist_ok=True)
    with open(target, "w", encoding="ascii") as fh:
        fh.write(fractional + "\n")
    print(f"wrote {DIGITS} digits to {target}")
