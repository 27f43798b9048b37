"""Semantic-attention Siamese tracker."""
