"""xlctsim: virtual focused-beam X-ray luminescence CT scanner.

Simulates fly-scan pencil-beam acquisitions (XLCT photon counts plus a
simultaneous pencil-beam CT sinogram) of voxel phantoms and reconstructs
nanophosphor concentration volumes (MLEM / FISTA-L1) and attenuation
images (parallel-beam FBP).
"""

__version__ = "0.1.0"

from .phantom import (Grid, TissueProperties, TargetSpec, VoxelPhantom,
                      add_capillary_target, add_uniform_background,
                      build_cylinder_phantom, property_at)
from .scan import (BeamPose, DetectorSet, FlyBin, Ray, ScanProtocol, beam_ray,
                   detector_ring, enumerate_fly_bins, make_protocol,
                   quadrature_poses)
from .transport import (FluenceDeposit, OpticalBackground, RayTraceResult,
                        beam_fluence, detector_weight, diffusion_params,
                        greens_cw, siddon_trace, xray_line_integral)
from .forward import (MeasurementSet, SourceModel, SystemMatrix, apply,
                      apply_adjoint, assemble_static_matrix,
                      assemble_system_matrix, synthesize_ct, synthesize_xlct)
from .recon import (ReconVolume, SolverConfig, fbp_parallel, fista_l1,
                    l1_weight_heuristic, mlem, power_iteration_lipschitz)
from .metrics import (LineProfile, TimingModel, cnr, dice, estimate_scan_time,
                      estimate_step_scan_time, line_profile_fwhm,
                      sample_profile)
