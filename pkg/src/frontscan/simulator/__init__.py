"""Local CDN edge simulator, test CA and the Host-rewrite demo."""
