# -*- coding: utf-8 -*-
#
# Configuration file for the Sphinx documentation builder.
#
# This file does only contain a selection of the most common options. For a
# full list see the documentation:
# http://www.sphinx-doc.org/en/master/config

# -- Project information -----------------------------------------------------

project = 'SPD GCP Geometry'
copyright = '2024, The spd-gcp-geometry Authors'
author = 'The spd-gcp-geometry Authors'

# The short X.Y version
version = ''
# The full version, including alpha/beta/rc tags
release = '0.0'


# -- General configuration ---------------------------------------------------

extensions = []

# Add any paths that contain templates here, relative to this directory.
templates_path = ['_templates']

source_suffix = '.rst'

# The master toctree document.
master_doc = 'index'

language = None

exclude_patterns = []

pygments_style = None


# -- Options for HTML output -------------------------------------------------

html_theme = 'alabaster'

html_static_path = []

htmlhelp_basename = 'SpdGcpGeometry-doc'


# -- Options for manual page output ------------------------------------------

# One entry per manual page. List of tuples
# (source start file, name, description, authors, manual section).
man_pages = [
    (master_doc, 'spd-gcp', 'SPD GCP Geometry Documentation',
     [author], 1)
]
