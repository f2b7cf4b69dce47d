# %% [markdown]
# From a simulated range scan to the 32x32 image the classifier sees.
import math
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from palletscan.augment import augment_example
from palletscan.raster import GridSpec, downscale, scan_to_image, write_pgm
from palletscan.scan_core import parse_scan, write_scan
from palletscan.synth import Pallet, WorldSpec, raycast

# %%
# a 10 m square room, sensor in the middle looking along +x, pallet 2 m ahead facing us
world = WorldSpec(pallet=Pallet((2.4, 0.5), orientation=math.pi), seed=1)
res = raycast(world)
scan = res.scan
print(f"{len(scan.ranges)} beams, {res.pallet_beams.sum()} of them end on the pallet")
print("label:", res.label)

# %%
# scans round-trip through the text format
assert parse_scan(write_scan(scan)) == scan

# %%
grid = GridSpec()  # 250 px over +-5 m, 4 cm per pixel
img = scan_to_image(scan, grid)
small = downscale(img, 32)
print(f"raster {img.shape}, {int(img.sum())} lit pixels; downscaled {small.shape}, {int(small.sum())} lit")

# the pallet box in raster coordinates and what falls inside it
(box,) = res.label.boxes
print("box", box, "lit inside:", int(img[box.row0:box.row1, box.col0:box.col1].sum()))

# %%
# eight dihedral copies; the box follows each transform
variants = augment_example(img, res.label.boxes)
for k, (v, boxes) in enumerate(variants):
    assert np.sort(v, axis=None).tolist() == np.sort(img, axis=None).tolist()
    print(k, boxes[0])

# %%
# without noise the same world always yields the same scan
quiet = replace(world, noise_sigma=0.0)
assert raycast(quiet).scan == raycast(replace(quiet, seed=7)).scan

out = Path(tempfile.mkdtemp(prefix="palletscan-demo-"))
write_pgm(out / "raster.pgm", img)
write_pgm(out / "raster32.pgm", small)
print("wrote", sorted(p.name for p in out.iterdir()), "to", out)
