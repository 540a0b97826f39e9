"""Voltage multistability toolkit for distribution feeders with reversed power flow."""
