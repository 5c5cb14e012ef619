class ExportUnsupported(RuntimeError):
    """The model or template cannot produce traces usable for guided decoding:
    the model does not expose attention weights, or the template lacks the
    context/question slots needed for role labeling."""
