"""Scenario files, the run pipeline and the ``qdl`` command."""
