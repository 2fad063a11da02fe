"""Walk through the normalizer kernels and check them against each other.

Every normalizer differs only in the axes its statistics pool over, so a
few configurations collapse onto each other exactly. A switchable layer
with one-hot ratios is just the normalizer it selects.

    python demos/01_kernels_and_equivalences.py
"""

import numpy as np

from normswitch import checks
from normswitch import normalizers as N
from normswitch import switchable as S

rng = np.random.default_rng(0)
x = rng.standard_normal((4, 6, 5, 5)) * 3 + 1
aff = N.AffineParams(np.ones(6), np.zeros(6))


def show(label, a, b):
    print(f"  {label:32s} max |diff| = {np.max(np.abs(a - b)):.1e}")


print("Axis-set equivalences")
show("GN with 1 group vs LN", N.norm_forward(N.GN(1), x, aff)[0], N.norm_forward(N.LN, x, aff)[0])
show("GN with C groups vs IN", N.norm_forward(N.GN(6), x, aff)[0], N.norm_forward(N.IN, x, aff)[0])
show("BN, 1 sample per shard vs IN", N.norm_forward(N.BN, x, aff, shard=N.ShardConfig(4, 1))[0], N.norm_forward(N.IN, x, aff)[0])

print("\nSwitchable layer at initialization: equal thirds")
layer = S.SNLayer(S.RatioState(), aff)
print("  lambda_mu   ", layer.state.lambda_mu)
y, _ = S.sn_forward(x, layer)
print(f"  output mean {y.mean():+.3e}, output std {y.std():.4f}")

print("\nOne-hot ratios reproduce the chosen normalizer")
for m in S.MEMBERS:
    hard = S.SNLayer(S.apply_hard(S.RatioState(), S.HardRatio(m, m)), aff)
    show(f"SN hard {m}", S.sn_forward(x, hard)[0], N.norm_forward(S.KINDS[m], x, aff)[0])

print("\nFinite-difference checks of every backward")
for r in checks.run_checks("all"):
    print(f"  {r.module:12s} {r.op:20s} worst rel err {r.max_rel_error:.2e}  {'ok' if r.passed else 'FAIL'}")
