from .config import (BaselineConfig, DataConfig, DeviceConfig, ExperimentConfig, PolicyConfig,
                     config_from_dict, config_to_dict, load_config, save_config)
from .metrics import (CSV_HEADER, FIELDS, ComparisonReport, ComparisonRow, MetricsLog, MetricsRow,
                      convergence_epoch, emit, read_csv, read_json)
from .runner import build_environment, run_baseline, run_experiment
from .compare import compare
