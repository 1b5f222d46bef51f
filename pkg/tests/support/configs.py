ROTATOR_2 = """
seed = 42

[chain]
kind = "Rotator"
N = 2

[[chain.interaction]]
c0 = 2.0
cos = [1.0]
"""

ROTATOR_2_COEFFS = ROTATOR_2 + """
[coeffs]
a = [512000.0, 800.0, 10.0]
h0 = 1.0
C1 = 1.0e12
"""

QUADRATIC_OSCILLATOR_2 = """
seed = 7

[chain]
kind = "Oscillator"

[[chain.pinning]]
poly = [0.0, 0.0, 0.5]

[[chain.pinning]]
poly = [0.0, 0.0, 0.5]

[[chain.interaction]]
poly = [0.0, 0.0, 0.5]
"""

TWO_WELL_OSCILLATOR = """
[chain]
kind = "Oscillator"

[[chain.pinning]]
poly = [0.0, 0.0, -1.0, 0.0, 1.0]

[[chain.pinning]]
poly = [0.0, 0.0, -1.0, 0.0, 1.0]

[[chain.interaction]]
poly = [0.0, 0.0, 0.5]
"""


def write_config(directory, text, name="experiment.toml"):
    path = directory / name
    path.write_text(text, encoding="utf-8")
    return path
