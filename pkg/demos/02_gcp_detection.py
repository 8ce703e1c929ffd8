"""GCP candidate detection on the photo and on the DEM raster.

Renders a synthetic oblique photo of the box scene, runs the corner
detector on both sides, and draws the detections for inspection.
"""

from pathlib import Path

import numpy as np

from monoplot import DetectorConfig, dem_to_grayscale, detect_dem_gcps, detect_keypoints
from monoplot.imageio import save_png
from monoplot.synthetic import default_scene_camera, render_photo, three_box_dem

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)

dem = three_box_dem()
camera = default_scene_camera()
photo = render_photo(camera, dem, 640, 480)

cfg = DetectorConfig(max_keypoints=50, fast_threshold=20, nms_radius=8)
image_gcps = detect_keypoints(photo, cfg)
dem_gcps = detect_dem_gcps(dem, cfg)
print(f"image GCP candidates: {len(image_gcps)}")
print(f"DEM GCP candidates:   {len(dem_gcps)} (each carries world x/y/z)")
for g in dem_gcps[:4]:
    print(f"  pixel ({g.keypoint.u:6.2f}, {g.keypoint.v:6.2f})  ->  "
          f"world ({g.world.x:6.1f}, {g.world.y:6.1f}, {g.world.z:5.2f})")


def draw_markers(img, points, size=3):
    rgb = np.stack([img] * 3, axis=-1)
    for u, v in points:
        r, c = int(round(v)), int(round(u))
        rgb[max(0, r - size):r + size + 1, c, :] = [255, 64, 64]
        rgb[r, max(0, c - size):c + size + 1, :] = [255, 64, 64]
    return rgb


save_png(draw_markers(photo, [(k.u, k.v) for k in image_gcps]),
         out / "photo_gcps.png")
save_png(draw_markers(dem_to_grayscale(dem), [(g.keypoint.u, g.keypoint.v)
                                              for g in dem_gcps]),
         out / "dem_gcps.png")
print(f"wrote {out}/photo_gcps.png and dem_gcps.png")
