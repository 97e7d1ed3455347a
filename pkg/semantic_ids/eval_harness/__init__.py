from .metrics import SliceSpec, recall_at_k, EvaluationException
from .stats import paired_t_test, bonferroni, mean_std
from .synthetic import SynthParams, synth_generate, save_dataset
from .experiment import ExperimentReport, run_experiment, write_report, ExperimentException

__all__ = ['SliceSpec', 'recall_at_k', 'EvaluationException',
           'paired_t_test', 'bonferroni', 'mean_std',
           'SynthParams', 'synth_generate', 'save_dataset',
           'ExperimentReport', 'run_experiment', 'write_report', 'ExperimentException']
