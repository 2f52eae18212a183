"""Beamspace echocardiography toolkit.

Subpackages by concern: container (on-disk format), geometry (scan
conversion), timing (ECG and cardiac phase), metrics (benchmark losses and
data rules), annotations (contours, meshes, markers), phantom (synthetic
exams with analytic truth), pipeline (end-to-end scoring), cli.
"""

from .annotations import (AnnotationSet, Contour2D, Mesh3D, MeshFrame,
                          SparseMarker, mesh_volume, rasterize_contours,
                          strain_curve, volume_curve, voxelize_mesh)
from .container import (ExamManifest, Recording, Stream, StreamHeader,
                        make_stream, read_exam, read_recording,
                        validate_recording, write_exam, write_recording)
from .errors import EchoKitError, RefusalError, ValidationError
from .geometry import (CartesianGrid2D, CartesianGrid3D, SectorGeometry2D,
                       SphericalGeometry3D, beam_to_cartesian,
                       cartesian_to_beam, default_grid_for,
                       inverse_scan_convert_2d, scan_convert_2d,
                       scan_convert_3d)
from .metrics import (AliasParams, ColorBox, MaskParams, alias_distance,
                      aggregate_folds, dice_score, filter_recording,
                      make_patient_folds, masked_dice_loss, radial_weights,
                      sample_clips, task1_loss, task2_loss,
                      temporal_mean_baseline, turbulence_proxy,
                      valid_velocity_mask, velocity_scale, wrap_velocity)
from .phantom import PhantomConfig, generate_exam, ground_truth_loss
from .timing import (EcgTrace, RPeakList, SubAcquisition, detect_r_peaks,
                     pair_interleaved, phase_of, propagate_cycle_annotation,
                     rr_regularity, stitch_multibeat)

__version__ = "0.1.0"
