"""k-space artefact simulation and cascaded uncertainty segmentation for MRI QC."""
