"""Unsupervised domain adaptation for extractive reading comprehension.

A miniature transformer encoder trained on labeled source-domain QA together
with masked language modeling on unlabeled target-domain passages.
"""
__version__ = "0.1.0"
