"""DEM basics: the affine geotransform, sampling, and the grayscale render.

Builds the three-box heightfield, round-trips pixel/world coordinates,
samples terrain heights, and writes the rasters a corner detector sees.
Outputs land in demos/out/.
"""

from pathlib import Path

import numpy as np

from monoplot import (
    dem_to_grayscale,
    hillshade,
    pixel_to_world,
    sample_elevation,
    world_to_pixel,
    write_asc,
)
from monoplot.imageio import save_png
from monoplot.synthetic import three_box_dem

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)

dem = three_box_dem()
print(f"DEM: {dem.n_rows} x {dem.n_cols} cells, "
      f"elevations {dem.z_range()[0]:.0f}..{dem.z_range()[1]:.0f}")

# the affine map takes fractional pixel indices straight to world x/y
x, y = pixel_to_world(dem, 100.0, 60.0)
col, row = world_to_pixel(dem, x, y)
print(f"pixel (100, 60) -> world ({x:.1f}, {y:.1f}) -> pixel ({col:.1f}, {row:.1f})")

# bilinear terrain sampling; outside the raster hull the answer is NaN
print(f"elevation at ({x:.0f}, {y:.0f}): {sample_elevation(dem, x, y):.2f}")
print(f"elevation far outside:          {sample_elevation(dem, -500.0, -500.0)}")

# rescaled grayscale is what the corner detector consumes
save_png(dem_to_grayscale(dem), out / "dem_gray.png")
save_png(hillshade(dem), out / "dem_hillshade.png")
write_asc(dem, out / "boxes.asc")
print(f"wrote {out}/dem_gray.png, dem_hillshade.png, boxes.asc")
