"""Training pipelines, surgery, checkpoints and reports."""
