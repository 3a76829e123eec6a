"""HTTP service wrapping training, translation and evaluation."""
