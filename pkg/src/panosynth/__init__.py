"""Free-viewpoint synthesis for 360 panorama captures.

Pipeline stages:
  geometry    equirect pixel/angle/cartesian transforms, pose reprojection
  rasters     validated panorama rasters, sampling, missing-value helpers
  io          manifest + PFM/PNG readers and writers, frame selection
  scene       synthetic scene renderer used for fixtures and oracle tests
  densedepth  sphere-sweep ad-census stereo with guided-filter aggregation
  refine      sparse/dense fusion, raymarching correction, forward projection
  synthesis   target depth synthesis, backwards warping, weighted blending
  metrics     masked PSNR / SSIM / MS-SSIM
  service     interactive frame service (TCP session protocol + HTTP)
"""

__version__ = "0.1.0"
