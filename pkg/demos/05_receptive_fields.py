"""Receptive fields of the normalization layers in the bundled fixtures.

Ratio analysis is organized by receptive field, so every logged layer
carries its RF. This prints the per-layer RFs of the ResNet50 layout and
how they fall into the default analysis ranges.

    python demos/05_receptive_fields.py
"""

from collections import Counter

from normswitch.analytics import DEFAULT_RF_RANGES, layer_metas
from normswitch.network import mini_resnet_spec, resnet50_spec

for spec in (mini_resnet_spec(), resnet50_spec()):
    metas = layer_metas(spec)
    print(f"{spec.name}: {len(metas)} normalization layers, RF {metas[0].rf}..{metas[-1].rf}")
    print("  " + " ".join(f"{m.rf}{'s' if m.is_shortcut else ''}" for m in metas))
    counts = Counter(r.label for m in metas for r in DEFAULT_RF_RANGES if r.label != "ALL" and r.contains(m.rf))
    print("  layers per range: " + ", ".join(f"{r.label} {counts[r.label]}" for r in DEFAULT_RF_RANGES if r.label != "ALL"))
print("(s marks a projection shortcut)")
