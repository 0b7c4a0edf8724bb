from pnr_tomography import cli

cli.main()
