# Cost model package
