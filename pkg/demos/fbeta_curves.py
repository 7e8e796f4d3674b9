"""F-beta over beta in [0, 2] for a few (clean, adversarial) accuracy pairs.

At beta = 0 the score is the clean accuracy, for large beta it approaches
the adversarial one.  The two robust pairs trade clean for adversarial
accuracy, so their curves cross.
"""

from mdat.evalkit import f_beta_curve

pairs = {
    "vulnerable": (72.0, 18.0),
    "robust A": (68.0, 55.0),
    "robust B": (67.5, 58.0),
}

curves = {name: dict(f_beta_curve(c, a, 0.0, 2.0, 0.25)) for name, (c, a) in pairs.items()}
betas = sorted(next(iter(curves.values())))
print("beta  " + "".join(f"{name:>12s}" for name in curves))
for b in betas:
    print(f"{b:4.2f}  " + "".join(f"{curves[name][b]:12.2f}" for name in curves))
