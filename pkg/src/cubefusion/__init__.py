"""Camera + 4D-radar-cube 3D object detection with query-based fusion."""

from .boxes import CLASS_NAMES, Box3D, DetectionSet
from .camera import CameraFrame, project_ego_points, resize_image
from .config import (DataConfig, EvalConfig, ModelConfig, RunConfig,
                     TrainConfig, apply_overrides, load_config, save_config)
from .dataset import CubeDataset, generate_dataset
from .detection import (DetectionHead, FusionDetector, decode_boxes,
                        evaluate_model, prepare_batch, run_inference)
from .evaluation import (aggregate_report, average_precision, iou_3d, iou_bev,
                         simulate_sensor_failure, write_report)
from .fusion import (DeformableCrossAttention, FusionBlock,
                     PositionalEncoding2D, init_queries, project_to_camera,
                     project_to_radar_plane)
from .radar import (DualProjection, RadarCube, load_cube, project_cube,
                    save_cube, trim_artifacts)
from .synthetic import (Scene, SceneConfig, SensorRig, generate_scene,
                        render_camera, render_radar)
from .training import (Trainer, compute_losses, focal_loss, l1_box_loss,
                       load_checkpoint, match_hungarian, model_from_checkpoint,
                       save_checkpoint)

__version__ = "0.1.0"
