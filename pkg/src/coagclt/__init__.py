"""Smoluchowski coagulation laboratory."""
