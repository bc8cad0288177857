@problemName bad
@classLabel true a b
@data
1,2,x:a
