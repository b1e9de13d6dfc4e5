# Utils package for flare
